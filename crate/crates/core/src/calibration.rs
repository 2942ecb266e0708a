//! Extrinsic calibration: relative pose from salient point matches and metric
//! scale from a reference card.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, Feature, FeatureError, Match, MatchSet, SurfConfig};
use crate::geometry::{
    triangulate_normalized, triangulation_angle, CameraIntrinsics, ImagePoint, NormalizedMatch, RelativePose,
};
use crate::image::ImageGray;
use crate::robust::essential::{decompose_essential, lm_refine, FivePointEstimator, LmConfig, LmReport};
use crate::robust::homography::{Correspondence, Homography, HomographyEstimator};
use crate::robust::{ransac, RansacConfig, RobustError, ThresholdPolicy};
use crate::Point3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("relative pose: {0}")]
    Pose(#[source] RobustError),
    #[error("median triangulation angle {median_deg:.3}° is below {limit_deg}°")]
    InsufficientParallax { median_deg: f64, limit_deg: f64 },
    #[error("reference card not found ({inliers} homography inliers, need {needed})")]
    CardNotFound { inliers: usize, needed: usize },
    #[error("scale ratios have no histogram bin with at least {needed} samples")]
    DegenerateScale { needed: usize },
    #[error("invalid reference card: {0}")]
    InvalidCard(&'static str),
}

/// Textured card of known width lying on the table.
#[derive(Debug, Clone)]
pub struct ReferenceCard {
    pub pattern: ImageGray,
    pub physical_width: f64,
}

/// Credit-card width in mm.
pub const DEFAULT_CARD_WIDTH_MM: f64 = 85.6;

impl ReferenceCard {
    pub fn new(pattern: ImageGray) -> Self {
        Self { pattern, physical_width: DEFAULT_CARD_WIDTH_MM }
    }

    /// Millimetres per pattern pixel.
    pub fn mm_per_pixel(&self) -> f64 {
        self.physical_width / self.pattern.width() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub surf: SurfConfig,
    /// Distinctiveness ratio of symmetric matching.
    pub match_ratio: f64,
    pub ransac: RansacConfig,
    pub lm: LmConfig,
    pub min_parallax_deg: f64,
    /// Homography inlier threshold as a fraction of the card width.
    pub card_threshold: f64,
    pub min_card_inliers: usize,
    /// Scale histogram bin width relative to the median ratio.
    pub mode_bin_width: f64,
    pub min_mode_count: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            surf: SurfConfig::default(),
            match_ratio: 1.1,
            // Nearly planar scenes admit a twin pose that a short sampling run can
            // lock onto when the loose threshold counts most matches as inliers.
            ransac: RansacConfig { min_iterations: 200, ..RansacConfig::default() },
            lm: LmConfig::default(),
            min_parallax_deg: 0.5,
            card_threshold: 0.03,
            min_card_inliers: 8,
            mode_bin_width: 0.02,
            min_mode_count: 3,
        }
    }
}

/// Triangulated inlier matches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseCloud {
    pub points: Vec<Point3>,
    /// Index into the inlier [`MatchSet`] for each point.
    pub source_match: Vec<usize>,
}

impl SparseCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { points: self.points.iter().map(|p| Point3::from(p.coords * s)).collect(), source_match: self.source_match.clone() }
    }
}

/// Calibrated pair, before the metric scale is known.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: RelativePose<f64>,
    pub features1: Vec<Feature>,
    pub features2: Vec<Feature>,
    /// All symmetric matches.
    pub matches: MatchSet,
    pub inliers: MatchSet,
    pub cloud: SparseCloud,
    /// RANSAC inlier threshold in normalized image units.
    pub threshold: f64,
    pub ransac_iterations: usize,
    pub lm: LmReport,
    pub median_parallax_deg: f64,
}

impl PoseEstimate {
    /// Pixel coordinates of an inlier match.
    pub fn inlier_pixels(&self, i: usize) -> (ImagePoint<f64>, ImagePoint<f64>) {
        let m = &self.inliers.pairs[i];
        (self.features1[m.first].point.position, self.features2[m.second].point.position)
    }
}

fn normalized_matches(
    f1: &[Feature],
    f2: &[Feature],
    set: &MatchSet,
    k1: &CameraIntrinsics<f64>,
    k2: &CameraIntrinsics<f64>,
) -> Vec<NormalizedMatch<f64>> {
    set.pairs
        .iter()
        .map(|m| NormalizedMatch::new(k1.normalize(&f1[m.first].point.position), k2.normalize(&f2[m.second].point.position)))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pose of the second camera relative to the first, its inlier matches and
/// their triangulation (scale 1).
pub fn estimate_relative_pose(
    img1: &ImageGray,
    img2: &ImageGray,
    k1: &CameraIntrinsics<f64>,
    k2: &CameraIntrinsics<f64>,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<PoseEstimate, CalibrationError> {
    let features1 = features::detect_and_describe(img1, &cfg.surf)?;
    let features2 = features::detect_and_describe(img2, &cfg.surf)?;
    let matches =
        features::match_symmetric(&features::descriptors(&features1), &features::descriptors(&features2), cfg.match_ratio);
    estimate_from_matches(features1, features2, matches, k1, k2, cfg, seed)
}

/// [`estimate_relative_pose`] on precomputed features and matches.
pub fn estimate_from_matches(
    features1: Vec<Feature>,
    features2: Vec<Feature>,
    matches: MatchSet,
    k1: &CameraIntrinsics<f64>,
    k2: &CameraIntrinsics<f64>,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<PoseEstimate, CalibrationError> {
    let limit_deg = cfg.min_parallax_deg;
    let data = normalized_matches(&features1, &features2, &matches, k1, k2);
    if data.len() < 6 {
        return Err(CalibrationError::Pose(RobustError::InsufficientData { needed: 6, got: data.len() }));
    }
    // A static pair is caught before RANSAC, which cannot fit identical views.
    let ray_angle = |m: &NormalizedMatch<f64>| {
        let a = m.first.to_homogeneous().normalize();
        let b = m.second.to_homogeneous().normalize();
        a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees()
    };
    let median_motion = median(data.iter().map(ray_angle).collect());
    if median_motion < 1e-3 {
        return Err(CalibrationError::InsufficientParallax { median_deg: 0.0, limit_deg });
    }

    let est = FivePointEstimator;
    let policy = ThresholdPolicy::adaptive(&est, &data, cfg.ransac.noise_samples, seed);
    let fit = ransac(&data, &est, &policy, &cfg.ransac, seed).map_err(CalibrationError::Pose)?;
    let inlier_data: Vec<NormalizedMatch<f64>> = fit.inliers.iter().map(|&i| data[i]).collect();
    let pose = decompose_essential(&fit.model, &inlier_data).map_err(CalibrationError::Pose)?;
    let (pose, lm) = lm_refine(&pose, &inlier_data, &cfg.lm).map_err(CalibrationError::Pose)?;

    let median_parallax_deg = median(inlier_data.iter().map(|m| triangulation_angle(m, &pose).to_degrees()).collect());
    if !(median_parallax_deg >= limit_deg) {
        return Err(CalibrationError::InsufficientParallax { median_deg: median_parallax_deg, limit_deg });
    }

    let inliers = MatchSet { pairs: fit.inliers.iter().map(|&i| matches.pairs[i]).collect() };
    let mut cloud = SparseCloud::default();
    for (i, m) in inlier_data.iter().enumerate() {
        if let Ok(p) = triangulate_normalized(m, &pose) {
            if p.z > 0.0 && pose.transform(&p).z > 0.0 {
                cloud.points.push(p);
                cloud.source_match.push(i);
            }
        }
    }
    Ok(PoseEstimate {
        pose,
        features1,
        features2,
        matches,
        inliers,
        cloud,
        threshold: fit.threshold,
        ransac_iterations: fit.iterations_run,
        lm,
        median_parallax_deg,
    })
}

/// Densest histogram bin of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean of the samples in the bin, the mode estimate.
    pub mean: f64,
}

/// Histogram mode with bins of `relative_width · |median|`, one bin
/// centred on the median. Ties go to the bin nearest the median.
pub fn histogram_mode(samples: &[f64], relative_width: f64, min_count: usize) -> Option<ModeBin> {
    let finite: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let med = median(finite.clone());
    mode_with_width(&finite, med, (relative_width * med.abs()).max(f64::MIN_POSITIVE.sqrt()), min_count)
}

/// Histogram mode with bins of a fixed `width`, one bin centred on the
/// median. Ties go to the bin nearest the median.
pub fn histogram_mode_fixed(samples: &[f64], width: f64, min_count: usize) -> Option<ModeBin> {
    let finite: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || !(width > 0.0) {
        return None;
    }
    let med = median(finite.clone());
    mode_with_width(&finite, med, width, min_count)
}

fn mode_with_width(finite: &[f64], med: f64, width: f64, min_count: usize) -> Option<ModeBin> {
    let mut bins: std::collections::BTreeMap<i64, (usize, f64)> = Default::default();
    for &v in finite {
        let b = ((v - med) / width).round() as i64;
        let e = bins.entry(b).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += v;
    }
    let (&b, &(count, sum)) = bins.iter().max_by(|(ka, va), (kb, vb)| va.0.cmp(&vb.0).then(kb.abs().cmp(&ka.abs())))?;
    if count < min_count {
        return None;
    }
    let center = med + b as f64 * width;
    Some(ModeBin { lower: center - width / 2.0, upper: center + width / 2.0, count, mean: sum / count as f64 })
}

/// Metric scale of a calibrated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    /// Millimetres per model unit.
    pub scale: f64,
    pub ratio_samples: Vec<f64>,
    pub mode_bin: ModeBin,
    /// Image-1 to card (mm) homography.
    pub card_homography: Homography,
    /// Cloud indices of the card tracks that are homography inliers.
    pub card_points: Vec<usize>,
    pub tracks: usize,
}

/// A cloud point seen on the card in both views.
struct Track {
    cloud_index: usize,
    image1: Point2<f64>,
    card_mm: Point2<f64>,
}

/// Card-pattern feature of each image feature, keyed by image feature index.
fn card_lookup(image: &[Feature], card: &[Feature], ratio: f64) -> std::collections::HashMap<usize, usize> {
    let m = features::match_symmetric(&features::descriptors(image), &features::descriptors(card), ratio);
    m.pairs.iter().map(|Match { first, second, .. }| (*first, *second)).collect()
}

/// Recovers millimetres per model unit from the reference card and applies
/// it to the pose and cloud.
pub fn estimate_scale(
    estimate: &mut PoseEstimate,
    card: &ReferenceCard,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<ScaleEstimate, CalibrationError> {
    if !(card.physical_width > 0.0) {
        return Err(CalibrationError::InvalidCard("physical width must be positive"));
    }
    let needed = cfg.min_card_inliers;
    let card_features = features::detect_and_describe(&card.pattern, &cfg.surf)
        .map_err(|_| CalibrationError::InvalidCard("pattern has too little texture"))?;
    let in1 = card_lookup(&estimate.features1, &card_features, cfg.match_ratio);
    let in2 = card_lookup(&estimate.features2, &card_features, cfg.match_ratio);
    let mm = card.mm_per_pixel();
    let tracks: Vec<Track> = estimate
        .cloud
        .source_match
        .iter()
        .enumerate()
        .filter_map(|(cloud_index, &mi)| {
            let m = estimate.inliers.pairs[mi];
            let c = *in1.get(&m.first)?;
            (in2.get(&m.second) == Some(&c)).then(|| {
                let p = estimate.features1[m.first].point.position;
                let q = card_features[c].point.position;
                Track { cloud_index, image1: Point2::new(p.u, p.v), card_mm: Point2::new(q.u * mm, q.v * mm) }
            })
        })
        .collect();
    if tracks.len() < needed.max(4) {
        return Err(CalibrationError::CardNotFound { inliers: tracks.len(), needed });
    }

    let corr: Vec<Correspondence> = tracks.iter().map(|t| Correspondence::new(t.image1, t.card_mm)).collect();
    let policy = ThresholdPolicy::Fixed(cfg.card_threshold * card.physical_width);
    let fit = ransac(&corr, &HomographyEstimator, &policy, &cfg.ransac, seed ^ 0xca7d)
        .map_err(|_| CalibrationError::CardNotFound { inliers: 0, needed })?;
    if fit.inliers.len() < needed {
        return Err(CalibrationError::CardNotFound { inliers: fit.inliers.len(), needed });
    }

    // Physical positions are the homography images of the triangulated
    // image-1 points.
    let located: Vec<(Point3, Point2<f64>)> = fit
        .inliers
        .iter()
        .filter_map(|&i| {
            let t = &tracks[i];
            Some((estimate.cloud.points[t.cloud_index], fit.model.apply(&t.image1)?))
        })
        .collect();
    let mut ratio_samples = Vec::with_capacity(located.len() * located.len() / 2);
    for (i, (p, a)) in located.iter().enumerate() {
        for (q, b) in &located[i + 1..] {
            let d = (p - q).norm();
            if d > 0.0 {
                ratio_samples.push((a - b).norm() / d);
            }
        }
    }
    let mode_bin = histogram_mode(&ratio_samples, cfg.mode_bin_width, cfg.min_mode_count)
        .ok_or(CalibrationError::DegenerateScale { needed: cfg.min_mode_count })?;
    let scale = mode_bin.mean;
    if !(scale > 0.0) {
        return Err(CalibrationError::DegenerateScale { needed: cfg.min_mode_count });
    }
    estimate.pose.scale = scale;
    estimate.cloud = estimate.cloud.scaled(scale);
    Ok(ScaleEstimate {
        scale,
        ratio_samples,
        mode_bin,
        card_homography: fit.model,
        card_points: fit.inliers.iter().map(|&i| tracks[i].cloud_index).collect(),
        tracks: tracks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_of_constant_ratios() {
        let m = histogram_mode(&[2.0; 10], 0.02, 3).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!(m.lower <= 2.0 && 2.0 <= m.upper);
    }

    #[test]
    fn mode_needs_min_count() {
        assert!(histogram_mode(&[1.0, 2.0, 3.0, 4.0], 0.02, 3).is_none());
        assert!(histogram_mode(&[], 0.02, 1).is_none());
    }

    #[test]
    fn mode_ignores_outliers() {
        let mut v: Vec<f64> = (0..50).map(|i| 3.0 + 0.001 * (i % 5) as f64).collect();
        v.extend((0..30).map(|i| 1.0 + 0.37 * i as f64));
        let m = histogram_mode(&v, 0.02, 3).unwrap();
        assert!((m.mean - 3.002).abs() < 0.01, "{m:?}");
        assert!(m.lower <= m.mean && m.mean <= m.upper);
    }

    #[test]
    fn identical_images_lack_parallax() {
        let img = crate::synth::card_pattern(120.0, 90.0, 4);
        let k = CameraIntrinsics::new(500.0, 500.0, 239.5, 179.5, 480, 360).unwrap();
        let err = estimate_relative_pose(&img, &img, &k, &k, &CalibrationConfig::default(), 1).unwrap_err();
        assert!(matches!(err, CalibrationError::InsufficientParallax { .. }), "{err:?}");
    }

    #[test]
    fn blank_images_have_no_features() {
        let img = ImageGray::new(128, 128, 90);
        let k = CameraIntrinsics::new(100.0, 100.0, 63.5, 63.5, 128, 128).unwrap();
        let err = estimate_relative_pose(&img, &img, &k, &k, &CalibrationConfig::default(), 1).unwrap_err();
        assert!(matches!(err, CalibrationError::Features(FeatureError::TooFewFeatures { .. })), "{err:?}");
    }
}
