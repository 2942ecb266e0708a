//! End-to-end driver: calibration, dense stereo and volume extraction.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::calibration::{self, CalibrationError, ReferenceCard};
use crate::config::{ConfigError, PipelineConfig};
use crate::geometry::{rotation_angle_between, CameraIntrinsics, PixelMatch};
use crate::stereo::{self, DisparityMap, RectifiedMatch, RectifiedPair, StereoError};
use crate::volume::{self, DepthMap, LabeledMesh, SegmentationMap, VolumeError, VolumeReport, DISH_LABEL};
use crate::{ImageGray, Matrix3, Point3};

/// Stereo matches needed on the dish before the disparity range is taken
/// from them alone.
const MIN_DISH_MATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibration,
    Stereo,
    Volume,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Calibration => "calibration",
            Stage::Stereo => "stereo",
            Stage::Volume => "volume",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Stereo(#[from] StereoError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl StageError {
    fn stage(&self) -> Stage {
        match self {
            StageError::Calibration(_) => Stage::Calibration,
            StageError::Stereo(_) => Stage::Stereo,
            StageError::Volume(_) => Stage::Volume,
        }
    }

    fn hint(&self) -> &'static str {
        use CalibrationError as C;
        use StereoError as S;
        use VolumeError as V;
        match self {
            StageError::Calibration(C::InsufficientParallax { .. }) => "increase relative angle toward 15–25°",
            StageError::Calibration(C::Features(_)) => "use sharper, well-lit and more textured images",
            StageError::Calibration(C::Pose(_)) => "make the two views overlap more and keep the scene static",
            StageError::Calibration(C::CardNotFound { .. }) => {
                "keep the whole reference card visible and in focus in both images"
            }
            StageError::Calibration(C::DegenerateScale { .. }) => "keep the reference card flat on the table",
            StageError::Calibration(C::InvalidCard(_)) => "check the reference card pattern and its physical width",
            StageError::Stereo(S::RectificationFailed(_)) => "move the camera between the shots instead of rotating it",
            StageError::Stereo(S::TooFewMatches { .. }) => "increase the overlap of the two views on the dish",
            StageError::Stereo(S::EmptyRange | S::EmptyRoi) => "make sure the dish is visible in both images",
            StageError::Stereo(S::InvalidConfig(_)) | StageError::Volume(V::InvalidConfig(_)) => {
                "fix the configuration value named in the message"
            }
            StageError::Volume(V::EmptyDisparity) => "add texture to the scene or reduce the relative angle",
            StageError::Volume(V::NoFoodPixels) => "label food items with values of 2 or more in the segmentation",
            StageError::Volume(V::RimPlaneFailed(_)) => "keep the whole dish rim visible and labelled 1",
            StageError::Volume(V::TablePlaneFailed(_)) => "keep the reference card visible on the table",
            StageError::Volume(V::InvalidSegmentation(_) | V::SizeMismatch(_)) => {
                "provide a segmentation of the same size as the first image"
            }
            StageError::Volume(V::Io { .. } | V::Image(_)) => "check that the file exists and is readable",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{stage} stage failed: {source}; hint: {hint}")]
    Stage {
        stage: Stage,
        hint: &'static str,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// Whether the error lies in the inputs or configuration rather than in
    /// a processing stage.
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) => true,
            PipelineError::Stage { source, .. } => matches!(
                source,
                StageError::Volume(VolumeError::InvalidSegmentation(_) | VolumeError::SizeMismatch(_))
                    | StageError::Calibration(CalibrationError::InvalidCard(_))
            ),
        }
    }
}

impl<E: Into<StageError>> From<E> for PipelineError {
    fn from(e: E) -> Self {
        let source = e.into();
        PipelineError::Stage { stage: source.stage(), hint: source.hint(), source }
    }
}

pub struct PipelineInputs<'a> {
    pub img1: &'a ImageGray,
    pub img2: &'a ImageGray,
    /// Labels of image 1.
    pub seg: &'a SegmentationMap,
    pub k1: &'a CameraIntrinsics<f64>,
    pub k2: &'a CameraIntrinsics<f64>,
    pub card: &'a ReferenceCard,
}

/// The report and the intermediate products worth inspecting.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: VolumeReport,
    pub pair: RectifiedPair,
    pub disparity: DisparityMap,
    pub depth: DepthMap,
    pub mesh: LabeledMesh,
}

impl PipelineOutput {
    /// Writes `rect1.png`, `rect2.png`, `disparity.png` (16-bit, see
    /// [`DisparityMap::to_png16`]) and `mesh.obj` into `dir`.
    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let img = |e: crate::image::ImageError| std::io::Error::other(e.to_string());
        self.pair.rect1.save_png(dir.join("rect1.png")).map_err(img)?;
        self.pair.rect2.save_png(dir.join("rect2.png")).map_err(img)?;
        self.disparity.save_png16(dir.join("disparity.png")).map_err(img)?;
        std::fs::write(dir.join("mesh.obj"), self.mesh.to_obj())
    }
}

/// Per-stage seeds drawn from the config seed in a fixed order.
struct StageSeeds {
    pose: u64,
    scale: u64,
    plane: u64,
}

impl StageSeeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { pose: rng.next_u64(), scale: rng.next_u64(), plane: rng.next_u64() }
    }
}

fn check_inputs(i: &PipelineInputs<'_>) -> Result<(), PipelineError> {
    for (name, img, k) in [("first", i.img1, i.k1), ("second", i.img2, i.k2)] {
        k.validate().map_err(|e| PipelineError::Input(format!("{name} camera: {e}")))?;
        if img.width() != k.width as usize || img.height() != k.height as usize {
            return Err(PipelineError::Input(format!(
                "{name} image is {}×{} but its intrinsics are for {}×{}",
                img.width(),
                img.height(),
                k.width,
                k.height
            )));
        }
    }
    if i.seg.width() != i.img1.width() || i.seg.height() != i.img1.height() {
        return Err(PipelineError::Input(format!(
            "segmentation is {}×{} but the first image is {}×{}",
            i.seg.width(),
            i.seg.height(),
            i.img1.width(),
            i.img1.height()
        )));
    }
    Ok(())
}

fn rotation_deg(r: &Matrix3) -> f64 {
    rotation_angle_between(r, &Matrix3::identity()).to_degrees()
}

/// Runs the three stages and returns the per-item volumes.
pub fn run_pipeline(inputs: &PipelineInputs<'_>, cfg: &PipelineConfig) -> Result<VolumeReport, PipelineError> {
    run_pipeline_detailed(inputs, cfg).map(|o| o.report)
}

/// [`run_pipeline`] keeping the intermediate products.
pub fn run_pipeline_detailed(inputs: &PipelineInputs<'_>, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    check_inputs(inputs)?;
    let seeds = StageSeeds::new(cfg.seed);
    let start = Instant::now();
    let mut timings = Vec::new();
    let mut lap = |name: &str, since: Instant| timings.push((name.to_string(), since.elapsed().as_secs_f64()));

    let t = Instant::now();
    let ccfg = cfg.calibration_config();
    let mut est = calibration::estimate_relative_pose(inputs.img1, inputs.img2, inputs.k1, inputs.k2, &ccfg, seeds.pose)?;
    let scale = calibration::estimate_scale(&mut est, inputs.card, &ccfg, seeds.scale)?;
    let table: Vec<Point3> = scale.card_points.iter().map(|&i| est.cloud.points[i]).collect();
    lap("calibration", t);

    let t = Instant::now();
    let pair = stereo::rectify(inputs.img1, inputs.img2, &est.pose, inputs.k1, inputs.k2)?;
    let matches: Vec<PixelMatch<f64>> = (0..est.inliers.len())
        .map(|i| {
            let (first, second) = est.inlier_pixels(i);
            PixelMatch { first, second }
        })
        .collect();
    let unordered = pair.rectify_matches(&matches);
    let pair = stereo::order_check_and_mirror(pair, &unordered);
    let sparse = pair.rectify_matches(&matches);
    let seg = inputs.seg;
    let label_at = |m: &PixelMatch<f64>| {
        let x = (m.first.u.round().max(0.0) as usize).min(seg.width() - 1);
        let y = (m.first.v.round().max(0.0) as usize).min(seg.height() - 1);
        seg.get(x, y)
    };
    let dish: Vec<RectifiedMatch> =
        sparse.iter().zip(&matches).filter(|(_, m)| label_at(m) >= DISH_LABEL).map(|(r, _)| *r).collect();
    let range_source = if dish.len() >= MIN_DISH_MATCHES { &dish } else { &sparse };
    let range = stereo::disparity_range(range_source, cfg.stereo.range_margin)?;
    let roi = volume::rectified_roi(&pair, seg);
    let roi_pixels = roi.as_slice().iter().filter(|&&b| b).count();
    let raw = stereo::dp_stereo(&pair, range, &roi, &cfg.stereo)?;
    let disparity = stereo::median_refine(&raw, cfg.stereo.median_kernel);
    lap("stereo", t);

    let t = Instant::now();
    let (_, depth) = volume::dense_cloud(&disparity, &pair)?;
    let rim = volume::masked_points(&depth, &seg.rim_band(cfg.volume.rim_band_px));
    let dish_plane = volume::dish_plane(&rim, &table, &cfg.volume, seeds.plane)?;
    let mesh = volume::sample_mesh(&depth, seg, cfg.volume.mesh_size)?;
    let mut report = volume::integrate_volume(&mesh, &dish_plane.plane);
    lap("volume", t);
    lap("total", start);

    let d = &mut report.diagnostics;
    d.features = Some([est.features1.len(), est.features2.len()]);
    d.matches = Some(est.matches.len());
    d.pose_inliers = Some(est.inliers.len());
    d.pose_threshold = Some(est.threshold);
    d.median_parallax_deg = Some(est.median_parallax_deg);
    d.relative_rotation_deg = Some(rotation_deg(&est.pose.rotation));
    d.scale_mm = Some(scale.scale);
    d.card_tracks = Some(scale.tracks);
    d.card_inliers = Some(scale.card_points.len());
    d.disparity_range = Some(range);
    d.mirrored = Some(pair.frame.mirrored);
    d.disparity_valid_fraction = Some(if roi_pixels == 0 { 0.0 } else { disparity.valid_count() as f64 / roi_pixels as f64 });
    d.rim_inliers = Some(dish_plane.rim_inliers);
    d.table_inliers = Some(dish_plane.table_inliers);
    d.table_offset_mm = Some(dish_plane.table_offset_mm);
    d.timings = timings;
    Ok(PipelineOutput { report, pair, disparity, depth, mesh })
}
