//! Dense point cloud, food-surface meshing, dish plane and volume
//! integration.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Point2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Triangulation};
use thiserror::Error;

use crate::calibration::histogram_mode_fixed;
use crate::geometry::{CameraIntrinsics, ImagePoint, Plane};
use crate::image::{ImageError, Raster};
use crate::robust::plane::PlaneEstimator;
use crate::robust::{ransac, RansacConfig, RobustError, ThresholdPolicy};
use crate::stereo::{DisparityMap, RectifiedPair, View};
use crate::Point3;

/// Label of pixels outside the dish.
pub const BACKGROUND_LABEL: u8 = 0;
/// Label of the plate itself.
pub const DISH_LABEL: u8 = 1;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("disparity map has no valid pixel")]
    EmptyDisparity,
    #[error("segmentation has no food pixel")]
    NoFoodPixels,
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("{0:?} size differs from the first image")]
    SizeMismatch(&'static str),
    #[error("rim plane: {0}")]
    RimPlaneFailed(String),
    #[error("table plane: {0}")]
    TablePlaneFailed(String),
    #[error("invalid volume configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Per-pixel labels aligned with the first image: 0 background, 1 dish,
/// 2.. food items. Every label in `1..=max` is present.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    labels: Raster<u8>,
}

impl SegmentationMap {
    pub fn new(labels: Raster<u8>) -> Result<Self, VolumeError> {
        let mut seen = [false; 256];
        for &l in labels.as_slice() {
            seen[l as usize] = true;
        }
        let max = (0..256).rev().find(|&l| seen[l]).unwrap_or(0);
        if let Some(gap) = (1..=max).find(|&l| !seen[l]) {
            return Err(VolumeError::InvalidSegmentation(format!("label {gap} missing below {max}")));
        }
        Ok(Self { labels })
    }

    /// Reads an 8-bit grayscale or palette PNG; palette indices are labels.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| VolumeError::Io { path: path.display().to_string(), source: e };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let invalid = |m: String| VolumeError::InvalidSegmentation(format!("{}: {m}", path.display()));
        let mut reader = decoder.read_info().map_err(|e| invalid(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| invalid("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| invalid(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight
            || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
        {
            return Err(invalid("expected an 8-bit palette or grayscale PNG".into()));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data: Vec<u8> = (0..h).flat_map(|y| buf[y * info.line_size..y * info.line_size + w].to_vec()).collect();
        Self::new(Raster::from_vec(w, h, data)?)
    }

    /// Writes a palette PNG with a fixed colour per label.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), VolumeError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| VolumeError::Io { path: path.display().to_string(), source: e };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width() as u32, self.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let palette: Vec<u8> = (0..=255u8)
            .flat_map(|l| match l {
                0 => [0, 0, 0],
                1 => [200, 200, 200],
                _ => [l.wrapping_mul(97), l.wrapping_mul(57).wrapping_add(80), l.wrapping_mul(31).wrapping_add(160)],
            })
            .collect();
        enc.set_palette(palette);
        let failed = |e: png::EncodingError| VolumeError::InvalidSegmentation(format!("{}: {e}", path.display()));
        let mut w = enc.write_header().map_err(failed)?;
        w.write_image_data(self.labels.as_slice()).map_err(failed)?;
        w.finish().map_err(failed)?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels.get(x, y)
    }

    pub fn raster(&self) -> &Raster<u8> {
        &self.labels
    }

    pub fn food_labels(&self) -> Vec<u8> {
        let max = self.labels.as_slice().iter().copied().max().unwrap_or(0);
        (DISH_LABEL + 1..=max).collect()
    }

    pub fn has_food(&self) -> bool {
        self.labels.as_slice().iter().any(|&l| l > DISH_LABEL)
    }

    /// Non-background pixels.
    pub fn foreground(&self) -> Raster<bool> {
        self.labels.map(|l| l != BACKGROUND_LABEL)
    }

    /// Dish pixels within Chebyshev distance `band` of the background.
    pub fn rim_band(&self, band: usize) -> Raster<bool> {
        let r = band as isize;
        let (w, h) = (self.width(), self.height());
        let bg = |x: isize, y: isize| self.labels.get_checked(x, y).is_some_and(|l| l == BACKGROUND_LABEL);
        // Separable dilation of the background mask.
        let horiz = Raster::from_fn(w, h, |x, y| (-r..=r).any(|d| bg(x as isize + d, y as isize)));
        Raster::from_fn(w, h, |x, y| {
            self.labels.get(x, y) == DISH_LABEL && (-r..=r).any(|d| horiz.get_checked(x as isize, y as isize + d) == Some(true))
        })
    }
}

/// Per-pixel depth (camera-1 `z`, millimetres) of the first image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Raster<f32>,
    pub valid: Raster<bool>,
    pub intrinsics: CameraIntrinsics<f64>,
}

impl DepthMap {
    /// Camera-1 point seen at an integer pixel.
    pub fn point(&self, x: usize, y: usize) -> Option<Point3> {
        self.valid.get(x, y).then(|| {
            let n = self.intrinsics.normalize(&ImagePoint::new(x as f64, y as f64));
            Point3::from(n.to_homogeneous() * self.depth.get(x, y) as f64)
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }
}

/// Triangulated cloud of every valid disparity, and the first image's depth
/// map from the nearest rectified disparity of each pixel.
pub fn dense_cloud(d: &DisparityMap, pair: &RectifiedPair) -> Result<(Vec<Point3>, DepthMap), VolumeError> {
    let f = &pair.frame;
    if d.valid_count() == 0 {
        return Err(VolumeError::EmptyDisparity);
    }
    let (cols, rows) = (d.values.width(), d.values.height());
    let cloud: Vec<Point3> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..cols).filter_map(move |c| {
                d.valid.get(c, r).then(|| f.triangulate(c as f64, r as f64, d.values.get(c, r) as f64)).flatten()
            })
        })
        .collect();
    let k = f.k1;
    let (w, h) = (k.width as usize, k.height as usize);
    let depths: Vec<Option<f32>> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let g = f.forward_map(View::First, &ImagePoint::new(x as f64, y as f64));
                let (c, r) = (g.x.round(), g.y.round());
                if !(c >= 0.0 && r >= 0.0 && (c as usize) < cols && (r as usize) < rows) {
                    return None;
                }
                let (c, r) = (c as usize, r as usize);
                if !d.valid.get(c, r) {
                    return None;
                }
                f.triangulate(g.x, g.y, d.values.get(c, r) as f64).map(|p| p.z as f32)
            })
        })
        .collect();
    let valid = Raster::from_vec(w, h, depths.iter().map(Option::is_some).collect())?;
    let depth = Raster::from_vec(w, h, depths.into_iter().map(|v| v.unwrap_or(0.0)).collect())?;
    Ok((cloud, DepthMap { depth, valid, intrinsics: k }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshVertex {
    pub position: Point3,
    /// Source pixel in the first image.
    pub pixel: [u32; 2],
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshTriangle {
    pub vertices: [u32; 3],
    pub label: u8,
}

/// Food surface mesh; every triangle has three vertices of its food label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledMesh {
    pub vertices: Vec<MeshVertex>,
    pub triangles: Vec<MeshTriangle>,
}

impl LabeledMesh {
    /// Wavefront OBJ text of the mesh.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.position.x, v.position.y, v.position.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t.vertices[0] + 1, t.vertices[1] + 1, t.vertices[2] + 1));
        }
        s
    }
}

/// Smallest accepted mesh size.
pub const MIN_MESH_SIZE: usize = 16;

/// Regular-grid sampling of the non-background pixels with about
/// `mesh_size` samples, Delaunay-triangulated in the image plane.
pub fn sample_mesh(depth: &DepthMap, seg: &SegmentationMap, mesh_size: usize) -> Result<LabeledMesh, VolumeError> {
    if mesh_size < MIN_MESH_SIZE {
        return Err(VolumeError::InvalidConfig("mesh size below 16"));
    }
    let (w, h) = (seg.width(), seg.height());
    if depth.depth.width() != w || depth.depth.height() != h {
        return Err(VolumeError::SizeMismatch("depth map"));
    }
    if !seg.has_food() {
        return Err(VolumeError::NoFoodPixels);
    }
    let area = seg.raster().as_slice().iter().filter(|&&l| l != BACKGROUND_LABEL).count();
    let pitch = (area as f64 / mesh_size as f64).sqrt().max(1.0);
    let mut vertices = Vec::new();
    let mut j = 0;
    loop {
        let y = ((j as f64 + 0.5) * pitch) as usize;
        if y >= h {
            break;
        }
        let mut i = 0;
        loop {
            let x = ((i as f64 + 0.5) * pitch) as usize;
            if x >= w {
                break;
            }
            let label = seg.get(x, y);
            if label != BACKGROUND_LABEL {
                if let Some(p) = depth.point(x, y) {
                    vertices.push(MeshVertex { position: p, pixel: [x as u32, y as u32], label });
                }
            }
            i += 1;
        }
        j += 1;
    }
    let mut dt: DelaunayTriangulation<spade::Point2<f64>> = DelaunayTriangulation::new();
    let mut handle_to_vertex = BTreeMap::new();
    for (i, v) in vertices.iter().enumerate() {
        let h = dt
            .insert(spade::Point2::new(v.pixel[0] as f64, v.pixel[1] as f64))
            .expect("finite integer pixel coordinates");
        handle_to_vertex.insert(h.index(), i as u32);
    }
    let mut triangles = Vec::new();
    for face in dt.inner_faces() {
        let idx = face.vertices().map(|v| handle_to_vertex[&v.fix().index()]);
        let labels = idx.map(|i| vertices[i as usize].label);
        if labels[0] > DISH_LABEL && labels.iter().all(|&l| l == labels[0]) {
            triangles.push(MeshTriangle { vertices: idx, label: labels[0] });
        }
    }
    triangles.sort_by_key(|t| t.vertices);
    Ok(LabeledMesh { vertices, triangles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    pub mesh_size: usize,
    /// Height of the dish bottom above the table.
    pub dish_bottom_height_mm: f64,
    /// Width of the dish band along the dish outline used as rim points.
    pub rim_band_px: usize,
    pub rim_threshold_mm: f64,
    pub table_threshold_mm: f64,
    pub min_rim_points: usize,
    pub min_table_points: usize,
    /// Bin width of the dish height histogram.
    pub height_bin_mm: f64,
    pub ransac: RansacConfig,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            mesh_size: 1 << 12,
            dish_bottom_height_mm: 10.0,
            rim_band_px: 3,
            rim_threshold_mm: 3.0,
            table_threshold_mm: 3.0,
            min_rim_points: 20,
            min_table_points: 10,
            height_bin_mm: 0.5,
            ransac: RansacConfig::default(),
        }
    }
}

impl VolumeConfig {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.mesh_size < MIN_MESH_SIZE {
            return Err(VolumeError::InvalidConfig("mesh size below 16"));
        }
        if !(self.dish_bottom_height_mm >= 0.0 && self.dish_bottom_height_mm.is_finite()) {
            return Err(VolumeError::InvalidConfig("dish bottom height must be non-negative"));
        }
        if !(self.rim_threshold_mm > 0.0 && self.table_threshold_mm > 0.0 && self.height_bin_mm > 0.0) {
            return Err(VolumeError::InvalidConfig("plane thresholds and bin width must be positive"));
        }
        if self.min_rim_points < 3 || self.min_table_points < 3 {
            return Err(VolumeError::InvalidConfig("planes need at least three points"));
        }
        Ok(())
    }
}

/// Fitted reference planes and the resulting dish-bottom plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DishPlane {
    /// Dish bottom, normal towards the camera.
    pub plane: Plane<f64>,
    pub rim: Plane<f64>,
    pub table: Plane<f64>,
    pub rim_inliers: usize,
    pub table_inliers: usize,
    /// Signed distance of the table below the rim plane (negative).
    pub table_offset_mm: f64,
}

fn robust_plane(points: &[Point3], threshold: f64, cfg: &RansacConfig, seed: u64) -> Result<(Plane<f64>, usize), RobustError> {
    let fit = ransac(points, &PlaneEstimator, &ThresholdPolicy::Fixed(threshold), cfg, seed)?;
    Ok((fit.model, fit.inliers.len()))
}

/// Rim plane shifted along its normal so it lies `dish_bottom_height` above
/// the table.
pub fn dish_plane(
    rim_points: &[Point3],
    table_points: &[Point3],
    cfg: &VolumeConfig,
    seed: u64,
) -> Result<DishPlane, VolumeError> {
    cfg.validate()?;
    if rim_points.len() < cfg.min_rim_points {
        return Err(VolumeError::RimPlaneFailed(format!("{} points, need {}", rim_points.len(), cfg.min_rim_points)));
    }
    if table_points.len() < cfg.min_table_points {
        return Err(VolumeError::TablePlaneFailed(format!(
            "{} points, need {}",
            table_points.len(),
            cfg.min_table_points
        )));
    }
    let (rim, rim_inliers) = robust_plane(rim_points, cfg.rim_threshold_mm, &cfg.ransac, seed)
        .map_err(|e| VolumeError::RimPlaneFailed(e.to_string()))?;
    let (table, table_inliers) = robust_plane(table_points, cfg.table_threshold_mm, &cfg.ransac, seed ^ 0x7ab1e)
        .map_err(|e| VolumeError::TablePlaneFailed(e.to_string()))?;
    // Height of the table inliers below the rim plane; the rim is taken
    // parallel to the table, so no extrapolation of the table tilt enters.
    let samples: Vec<f64> = table_points
        .iter()
        .filter(|p| table.signed_distance(p).abs() <= cfg.table_threshold_mm)
        .map(|p| rim.signed_distance(p))
        .collect();
    let mode = histogram_mode_fixed(&samples, cfg.height_bin_mm, 1)
        .ok_or_else(|| VolumeError::TablePlaneFailed("no finite dish height".into()))?;
    let shift = mode.mean + cfg.dish_bottom_height_mm;
    let plane = Plane { normal: rim.normal, offset: rim.offset + shift };
    Ok(DishPlane { plane, rim, table, rim_inliers, table_inliers, table_offset_mm: mode.mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemVolume {
    pub label: u8,
    pub volume_ml: f64,
}

/// Pipeline diagnostics; fields of stages that did not run stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub features: Option<[usize; 2]>,
    pub matches: Option<usize>,
    pub pose_inliers: Option<usize>,
    pub pose_threshold: Option<f64>,
    pub median_parallax_deg: Option<f64>,
    pub relative_rotation_deg: Option<f64>,
    pub scale_mm: Option<f64>,
    pub card_tracks: Option<usize>,
    pub card_inliers: Option<usize>,
    pub disparity_range: Option<(f64, f64)>,
    pub mirrored: Option<bool>,
    pub disparity_valid_fraction: Option<f64>,
    pub rim_inliers: Option<usize>,
    pub table_inliers: Option<usize>,
    pub table_offset_mm: Option<f64>,
    pub mesh_vertices: Option<usize>,
    pub mesh_triangles: Option<usize>,
    /// Wall-clock seconds per stage; not serialized so that reports of
    /// identical runs are byte-identical.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    /// Ascending by label.
    pub items: Vec<ItemVolume>,
    pub dish_plane: Plane<f64>,
    pub diagnostics: Diagnostics,
}

impl VolumeReport {
    pub fn total_ml(&self) -> f64 {
        self.items.iter().map(|i| i.volume_ml).sum()
    }

    pub fn volume_of(&self, label: u8) -> Option<f64> {
        self.items.iter().find(|i| i.label == label).map(|i| i.volume_ml)
    }
}

/// Σ over triangles of their area projected on `plane` times the mean
/// corner height above it, corner heights clamped at 0.
pub fn integrate_volume(mesh: &LabeledMesh, plane: &Plane<f64>) -> VolumeReport {
    let mut per_label: BTreeMap<u8, f64> = mesh
        .vertices
        .iter()
        .filter(|v| v.label > DISH_LABEL)
        .map(|v| (v.label, 0.0))
        .collect();
    for t in &mesh.triangles {
        let [a, b, c] = t.vertices.map(|i| mesh.vertices[i as usize].position);
        let area = 0.5 * (b - a).cross(&(c - a)).dot(&plane.normal).abs();
        let height = [a, b, c].iter().map(|p| plane.signed_distance(p).max(0.0)).sum::<f64>() / 3.0;
        *per_label.entry(t.label).or_insert(0.0) += area * height;
    }
    VolumeReport {
        items: per_label.into_iter().map(|(label, mm3)| ItemVolume { label, volume_ml: mm3 / 1000.0 }).collect(),
        dish_plane: *plane,
        diagnostics: Diagnostics {
            mesh_vertices: Some(mesh.vertices.len()),
            mesh_triangles: Some(mesh.triangles.len()),
            ..Diagnostics::default()
        },
    }
}

/// Points of a depth map under a mask.
pub fn masked_points(depth: &DepthMap, mask: &Raster<bool>) -> Vec<Point3> {
    let mut out = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                out.extend(depth.point(x, y));
            }
        }
    }
    out
}

/// Mask for stereo matching on the first rectified image: every rectified
/// pixel that maps onto a foreground pixel of `seg`.
pub fn rectified_roi(pair: &RectifiedPair, seg: &SegmentationMap) -> Raster<bool> {
    let f = &pair.frame;
    let fg = seg.foreground();
    let rows: Vec<bool> = (0..f.rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let fg = &fg;
            (0..f.cols).map(move |c| {
                f.inverse_map(View::First, &Point2::new(c as f64, r as f64)).is_some_and(|p| {
                    let (x, y) = (p.u.round(), p.v.round());
                    x >= 0.0 && y >= 0.0 && fg.get_checked(x as isize, y as isize) == Some(true)
                })
            })
        })
        .collect();
    Raster::from_vec(f.cols, f.rows, rows).expect("sized by the frame")
}
