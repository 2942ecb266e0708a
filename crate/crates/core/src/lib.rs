//! Two-view reconstruction of a dish and metric volume estimation of the
//! food items on it.
//!
//! The pipeline has three stages:
//!
//! 1. [`calibration`]: salient points are detected and matched between the
//!    two views, the relative pose is fitted with an adaptive-threshold
//!    RANSAC ([`robust`]) and the metric scale is recovered from a reference
//!    card of known size.
//! 2. [`stereo`]: the pair is rectified around the epipoles and a dense
//!    disparity map is computed with Census costs and hierarchical dynamic
//!    programming.
//! 3. [`volume`]: the disparities are unprojected into a depth map, the food
//!    surface is meshed, a dish plane is built from the rim and the table, and
//!    the height of each item above the dish is integrated.
//!
//! [`synth`] renders textured synthetic dishes with exact ground truth and
//! [`metrics`] holds the evaluation statistics used on batches of estimates.
//!
//! The geometric kernels are generic over the scalar type ([`Real`]); the
//! aliases at the crate root fix them to `f64`, which is what the pipeline
//! uses throughout.

pub mod calibration;
pub mod config;
pub mod features;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod robust;
pub mod stereo;
pub mod synth;
pub mod volume;

mod scalar;

pub use scalar::Real;

pub use crate::config::PipelineConfig;
pub use crate::image::{ImageGray, Raster};
pub use crate::pipeline::{run_pipeline, PipelineError, PipelineInputs};

/// A 3D point in the first camera frame (millimetres once the scale is set).
pub type Point3 = nalgebra::Point3<f64>;
/// A 2D point in normalized (calibrated) image coordinates.
pub type Point2 = nalgebra::Point2<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;
pub type Matrix3 = nalgebra::Matrix3<f64>;

pub type ImagePoint = geometry::ImagePoint<f64>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
pub type RelativePose = geometry::RelativePose<f64>;
pub type EssentialModel = geometry::EssentialModel<f64>;
pub type Plane = geometry::Plane<f64>;
pub type PixelMatch = geometry::PixelMatch<f64>;
pub type NormalizedMatch = geometry::NormalizedMatch<f64>;
