//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationConfig, DEFAULT_CARD_WIDTH_MM};
use crate::features::SurfConfig;
use crate::robust::essential::LmConfig;
use crate::robust::RansacConfig;
use crate::stereo::StereoConfig;
use crate::volume::VolumeConfig;

/// Minimal sample size of the relative-pose solver.
const POSE_SAMPLE_SIZE: usize = 5;
/// Minimal sample size of the plane fits.
const PLANE_SAMPLE_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("strict mode requires `{0}` to be set explicitly")]
    MissingStrict(&'static str),
}

fn invalid(key: &'static str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid { key, message: e.to_string() }
}

/// The reference card: a pattern image and its physical width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceCardConfig {
    /// Pattern image; relative paths resolve against the config file.
    pub pattern: Option<PathBuf>,
    pub physical_width_mm: f64,
}

impl Default for ReferenceCardConfig {
    fn default() -> Self {
        Self { pattern: None, physical_width_mm: DEFAULT_CARD_WIDTH_MM }
    }
}

/// Settings of the salient point and pose stage; the RANSAC settings live
/// at the top level of [`PipelineConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub surf: SurfConfig,
    /// Distinctiveness ratio of symmetric matching.
    pub match_ratio: f64,
    pub lm: LmConfig,
    pub min_parallax_deg: f64,
    pub card_threshold: f64,
    pub min_card_inliers: usize,
    pub mode_bin_width: f64,
    pub min_mode_count: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            surf: c.surf,
            match_ratio: c.match_ratio,
            lm: c.lm,
            min_parallax_deg: c.min_parallax_deg,
            card_threshold: c.card_threshold,
            min_card_inliers: c.min_card_inliers,
            mode_bin_width: c.mode_bin_width,
            min_mode_count: c.min_mode_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of all randomness; each stage draws its own seed from it.
    pub seed: u64,
    /// Rejects configs that leave unstated quantities at their defaults.
    pub strict: bool,
    /// Pose RANSAC.
    pub ransac: RansacConfig,
    pub calibration: CalibrationSettings,
    pub reference_card: ReferenceCardConfig,
    pub stereo: StereoConfig,
    pub volume: VolumeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            strict: false,
            ransac: CalibrationConfig::default().ransac,
            calibration: CalibrationSettings::default(),
            reference_card: ReferenceCardConfig::default(),
            stereo: StereoConfig::default(),
            volume: VolumeConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let cfg: Self = serde_json::from_value(value.clone())?;
        if cfg.strict && value.pointer("/volume/dish_bottom_height_mm").is_none() {
            return Err(ConfigError::MissingStrict("volume.dish_bottom_height_mm"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative card pattern path is resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(p), Some(dir)) = (cfg.reference_card.pattern.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ransac.validate(POSE_SAMPLE_SIZE).map_err(|e| invalid("ransac", e))?;
        let c = &self.calibration;
        c.surf.validate().map_err(|e| invalid("calibration.surf", e))?;
        if !(c.match_ratio >= 1.0 && c.match_ratio.is_finite()) {
            return Err(invalid("calibration.match_ratio", "must be at least 1"));
        }
        if c.lm.max_iterations == 0 || !(c.lm.relative_tolerance > 0.0 && c.lm.initial_damping > 0.0) {
            return Err(invalid("calibration.lm", "iterations, tolerance and damping must be positive"));
        }
        if !(c.min_parallax_deg >= 0.0 && c.min_parallax_deg < 90.0) {
            return Err(invalid("calibration.min_parallax_deg", "must lie in [0, 90)"));
        }
        if !(c.card_threshold > 0.0 && c.card_threshold < 1.0) {
            return Err(invalid("calibration.card_threshold", "must lie in (0, 1)"));
        }
        if c.min_card_inliers < 4 {
            return Err(invalid("calibration.min_card_inliers", "a homography needs at least 4"));
        }
        if !(c.mode_bin_width > 0.0 && c.mode_bin_width < 1.0) {
            return Err(invalid("calibration.mode_bin_width", "must lie in (0, 1)"));
        }
        if c.min_mode_count == 0 {
            return Err(invalid("calibration.min_mode_count", "must be positive"));
        }
        if !(self.reference_card.physical_width_mm > 0.0 && self.reference_card.physical_width_mm.is_finite()) {
            return Err(invalid("reference_card.physical_width_mm", "must be positive"));
        }
        self.stereo.validate().map_err(|e| invalid("stereo", e))?;
        self.volume.validate().map_err(|e| invalid("volume", e))?;
        self.volume.ransac.validate(PLANE_SAMPLE_SIZE).map_err(|e| invalid("volume.ransac", e))?;
        Ok(())
    }

    /// The calibration stage's view of this config.
    pub fn calibration_config(&self) -> CalibrationConfig {
        let c = &self.calibration;
        CalibrationConfig {
            surf: c.surf.clone(),
            match_ratio: c.match_ratio,
            ransac: self.ransac.clone(),
            lm: c.lm.clone(),
            min_parallax_deg: c.min_parallax_deg,
            card_threshold: c.card_threshold,
            min_card_inliers: c.min_card_inliers,
            mode_bin_width: c.mode_bin_width,
            min_mode_count: c.min_mode_count,
        }
    }
}
