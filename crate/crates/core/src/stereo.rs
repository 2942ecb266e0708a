//! Dense matching: polar rectification around the epipoles, Census costs and
//! hierarchical dynamic programming along rectified rows.
//!
//! Rectified rows are epipolar half-planes, indexed by their angle `φ`
//! around the baseline; columns are the angle `α` between a viewing ray and
//! the baseline direction. Both views share the same `(φ, α)` grid, so a
//! scene point lies on the same row in both rectified images and its
//! disparity `col₂ − col₁` is its parallax angle in units of the column step.

use std::f64::consts::{PI, TAU};

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, ImagePoint, PixelMatch, RelativePose};
use crate::image::{ImageError, ImageGray, Raster};
use crate::Point3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StereoError {
    #[error("rectification failed: {0}")]
    RectificationFailed(&'static str),
    #[error("{found} sparse matches, need at least {needed}")]
    TooFewMatches { found: usize, needed: usize },
    #[error("empty disparity range")]
    EmptyRange,
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("invalid stereo configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StereoConfig {
    pub census_window: usize,
    pub aggregation_window: usize,
    pub median_kernel: usize,
    /// Pixels added on both ends of the sparse disparity range.
    pub range_margin: f64,
    /// Smoothness penalty per disparity step in flat regions (Hamming bits).
    pub lambda0: f64,
    /// Intensity standard deviation at which the penalty halves.
    pub sigma0: f64,
    /// Data cost charged for an occluded pixel, in Hamming bits.
    pub occlusion_cost: f64,
    /// Area of the region of interest after pre-scaling, in pixels.
    pub target_roi_area: f64,
    /// Half width of the search band around the upsampled coarse disparity.
    pub pyramid_band: i32,
    pub pyramid_min_dim: usize,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            census_window: 7,
            aggregation_window: 5,
            median_kernel: 5,
            range_margin: 32.0,
            lambda0: 8.0,
            sigma0: 10.0,
            occlusion_cost: 48.0,
            target_roi_area: (1u32 << 17) as f64,
            pyramid_band: 4,
            pyramid_min_dim: 64,
        }
    }
}

impl StereoConfig {
    pub fn validate(&self) -> Result<(), StereoError> {
        let odd = |w: usize| w % 2 == 1;
        if !(odd(self.census_window) && (3..=7).contains(&self.census_window)) {
            return Err(StereoError::InvalidConfig("census window must be 3, 5 or 7"));
        }
        if !(odd(self.aggregation_window) && odd(self.median_kernel)) {
            return Err(StereoError::InvalidConfig("aggregation and median windows must be odd"));
        }
        if !(self.range_margin >= 0.0 && self.lambda0 >= 0.0 && self.sigma0 > 0.0 && self.occlusion_cost >= 0.0) {
            return Err(StereoError::InvalidConfig("penalties must be non-negative and sigma0 positive"));
        }
        if !(self.target_roi_area > 0.0 && self.pyramid_band >= 1 && self.pyramid_min_dim >= 8) {
            return Err(StereoError::InvalidConfig("pyramid settings out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    First,
    Second,
}

/// The shared `(φ, α)` sampling grid of a rectified pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarFrame {
    /// Unit baseline direction and an orthonormal basis of its normal plane,
    /// all in the first camera frame.
    pub axis: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub phi0: f64,
    pub dphi: f64,
    pub alpha0: f64,
    pub dalpha: f64,
    pub rows: usize,
    pub cols: usize,
    pub k1: CameraIntrinsics<f64>,
    pub k2: CameraIntrinsics<f64>,
    pub pose: RelativePose<f64>,
    /// The second rectified image is stored left-right mirrored.
    pub mirrored: bool,
}

fn wrap_pi(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

impl PolarFrame {
    fn direction(&self, phi: f64, alpha: f64) -> Vector3<f64> {
        let (sa, ca) = alpha.sin_cos();
        let (sp, cp) = phi.sin_cos();
        self.axis * ca + (self.u * cp + self.v * sp) * sa
    }

    fn angles(&self, dir: &Vector3<f64>) -> (f64, f64) {
        let d = dir.normalize();
        (d.dot(&self.v).atan2(d.dot(&self.u)), d.dot(&self.axis).clamp(-1.0, 1.0).acos())
    }

    fn angles_to_grid(&self, phi: f64, alpha: f64) -> Point2<f64> {
        Point2::new((alpha - self.alpha0) / self.dalpha, wrap_pi(phi - self.phi0) / self.dphi)
    }

    fn grid_to_angles(&self, p: &Point2<f64>) -> (f64, f64) {
        (self.phi0 + p.y * self.dphi, self.alpha0 + p.x * self.dalpha)
    }

    fn mirror_col(&self, view: View, x: f64) -> f64 {
        if view == View::Second && self.mirrored {
            (self.cols - 1) as f64 - x
        } else {
            x
        }
    }

    /// Pixel of a view seen along a viewing ray given in the first camera
    /// frame (through the view's own centre).
    fn project_direction(&self, view: View, dir: &Vector3<f64>) -> Option<ImagePoint<f64>> {
        let (k, d) = match view {
            View::First => (&self.k1, *dir),
            View::Second => (&self.k2, self.pose.rotation * dir),
        };
        (d.z > 1e-12).then(|| ImagePoint::new(k.fx * d.x / d.z + k.cx, k.fy * d.y / d.z + k.cy))
    }

    fn pixel_direction(&self, view: View, p: &ImagePoint<f64>) -> Vector3<f64> {
        match view {
            View::First => self.k1.normalize(p).to_homogeneous(),
            View::Second => self.pose.rotation.transpose() * self.k2.normalize(p).to_homogeneous(),
        }
    }

    /// Rectified `(col, row)` of an original pixel.
    pub fn forward_map(&self, view: View, p: &ImagePoint<f64>) -> Point2<f64> {
        let (phi, alpha) = self.angles(&self.pixel_direction(view, p));
        let g = self.angles_to_grid(phi, alpha);
        Point2::new(self.mirror_col(view, g.x), g.y)
    }

    /// Original pixel of a rectified `(col, row)`; `None` behind the camera.
    pub fn inverse_map(&self, view: View, g: &Point2<f64>) -> Option<ImagePoint<f64>> {
        let g = Point2::new(self.mirror_col(view, g.x), g.y);
        let (phi, alpha) = self.grid_to_angles(&g);
        self.project_direction(view, &self.direction(phi, alpha))
    }

    /// Point in the first camera frame (scaled by the pose) matched at
    /// `(col, row)` of the first rectified image with disparity `d`.
    pub fn triangulate(&self, col: f64, row: f64, d: f64) -> Option<Point3> {
        let (phi, a1) = self.grid_to_angles(&Point2::new(col, row));
        let col2 = self.mirror_col(View::Second, col + d);
        let (_, a2) = self.grid_to_angles(&Point2::new(col2, row));
        let apex = a2 - a1;
        if !(apex > 1e-9 && a2 < PI) {
            return None;
        }
        let baseline = self.pose.scale * self.pose.translation.norm();
        let range = baseline * a2.sin() / apex.sin();
        let p = Point3::from(self.direction(phi, a1) * range);
        (p.z > 0.0 && self.pose.transform(&p).z > 0.0).then_some(p)
    }
}

/// A rectified image pair and its sampling grid.
#[derive(Debug, Clone)]
pub struct RectifiedPair {
    pub rect1: ImageGray,
    pub rect2: ImageGray,
    /// Rectified pixels that map inside the original images.
    pub valid1: Raster<bool>,
    pub valid2: Raster<bool>,
    pub frame: PolarFrame,
}

/// Rectified coordinates `(col, row)` of a match in both views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifiedMatch {
    pub first: Point2<f64>,
    pub second: Point2<f64>,
}

impl RectifiedMatch {
    pub fn disparity(&self) -> f64 {
        self.second.x - self.first.x
    }
}

fn boundary_samples(k: &CameraIntrinsics<f64>, step: f64) -> Vec<ImagePoint<f64>> {
    let (w, h) = (k.width as f64 - 1.0, k.height as f64 - 1.0);
    let mut out = Vec::new();
    let nx = (w / step).ceil() as usize;
    let ny = (h / step).ceil() as usize;
    for i in 0..=nx {
        let x = (i as f64 * step).min(w);
        out.push(ImagePoint::new(x, 0.0));
        out.push(ImagePoint::new(x, h));
    }
    for j in 0..=ny {
        let y = (j as f64 * step).min(h);
        out.push(ImagePoint::new(0.0, y));
        out.push(ImagePoint::new(w, y));
    }
    out
}

/// Arc `[start, start + len]` covering a set of angles; the full circle when
/// `full`.
fn covering_arc(phis: &[f64], full: bool) -> (f64, f64) {
    if full {
        return (-PI, TAU);
    }
    let mut a: Vec<f64> = phis.iter().map(|p| p.rem_euclid(TAU)).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    let (mut best_gap, mut after) = (a[0] + TAU - a[n - 1], 0);
    for i in 1..n {
        let g = a[i] - a[i - 1];
        if g > best_gap {
            best_gap = g;
            after = i;
        }
    }
    (a[after], TAU - best_gap)
}

fn intersect_arcs(a: (f64, f64), b: (f64, f64)) -> Option<(f64, f64)> {
    if a.1 >= TAU {
        return Some(b);
    }
    if b.1 >= TAU {
        return Some(a);
    }
    let s = (b.0 - a.0).rem_euclid(TAU);
    let mut best: Option<(f64, f64)> = None;
    for off in [s - TAU, s] {
        let lo = off.max(0.0);
        let hi = (off + b.1).min(a.1);
        if hi > lo && best.is_none_or(|(_, l)| hi - lo > l) {
            best = Some((a.0 + lo, hi - lo));
        }
    }
    best
}

/// Longest rectified side accepted.
const MAX_RECTIFIED_DIM: usize = 8192;

/// Polar rectification of a calibrated pair.
pub fn rectify(
    img1: &ImageGray,
    img2: &ImageGray,
    pose: &RelativePose<f64>,
    k1: &CameraIntrinsics<f64>,
    k2: &CameraIntrinsics<f64>,
) -> Result<RectifiedPair, StereoError> {
    let c2 = pose.second_center().coords;
    if !(c2.norm() > 1e-12 && c2.iter().all(|v| v.is_finite())) {
        return Err(StereoError::RectificationFailed("zero baseline"));
    }
    if img1.width() != k1.width as usize || img2.width() != k2.width as usize {
        return Err(StereoError::RectificationFailed("image and intrinsics sizes differ"));
    }
    let axis = c2.normalize();
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    let mut frame = PolarFrame {
        axis,
        u,
        v,
        phi0: 0.0,
        dphi: 1.0,
        alpha0: 0.0,
        dalpha: 1.0,
        rows: 1,
        cols: 1,
        k1: *k1,
        k2: *k2,
        pose: *pose,
        mirrored: false,
    };

    let mut arcs = Vec::new();
    let (mut a_lo, mut a_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut max_dphi, mut max_dalpha) = (0.0f64, 0.0f64);
    for (view, k) in [(View::First, k1), (View::Second, k2)] {
        let inside = |d: &Vector3<f64>| frame.project_direction(view, d).is_some_and(|p| k.contains(&p));
        let pierce_fwd = inside(&axis);
        let pierce_back = inside(&-axis);
        let samples = boundary_samples(k, 1.0);
        let mut phis = Vec::with_capacity(samples.len());
        for p in &samples {
            let (phi, alpha) = frame.angles(&frame.pixel_direction(view, p));
            phis.push(phi);
            a_lo = a_lo.min(alpha);
            a_hi = a_hi.max(alpha);
        }
        if pierce_fwd {
            a_lo = 0.0;
        }
        if pierce_back {
            a_hi = PI;
        }
        arcs.push(covering_arc(&phis, pierce_fwd || pierce_back));

        // Pixel displacement per radian along both grid axes.
        let mut probe: Vec<ImagePoint<f64>> = boundary_samples(k, 8.0);
        let step = (k.width.max(k.height) as f64 / 24.0).max(1.0);
        let mut y = 0.0;
        while y < k.height as f64 {
            let mut x = 0.0;
            while x < k.width as f64 {
                probe.push(ImagePoint::new(x, y));
                x += step;
            }
            y += step;
        }
        let eps = 1e-6;
        for p in &probe {
            let (phi, alpha) = frame.angles(&frame.pixel_direction(view, p));
            let Some(base) = frame.project_direction(view, &frame.direction(phi, alpha)) else { continue };
            if let Some(q) = frame.project_direction(view, &frame.direction(phi + eps, alpha)) {
                max_dphi = max_dphi.max(((q.u - base.u).hypot(q.v - base.v)) / eps);
            }
            if let Some(q) = frame.project_direction(view, &frame.direction(phi, alpha + eps)) {
                max_dalpha = max_dalpha.max(((q.u - base.u).hypot(q.v - base.v)) / eps);
            }
        }
    }
    let (phi_start, phi_len) =
        intersect_arcs(arcs[0], arcs[1]).ok_or(StereoError::RectificationFailed("views share no epipolar plane"))?;
    if !(max_dphi > 0.0 && max_dalpha > 0.0 && max_dphi.is_finite() && max_dalpha.is_finite()) {
        return Err(StereoError::RectificationFailed("degenerate sampling"));
    }
    frame.dphi = 1.0 / max_dphi;
    frame.dalpha = 1.0 / max_dalpha;
    frame.phi0 = phi_start;
    frame.alpha0 = a_lo;
    let rows = (phi_len / frame.dphi).ceil() as usize + 1;
    let cols = ((a_hi - a_lo) / frame.dalpha).ceil() as usize + 1;
    if rows > MAX_RECTIFIED_DIM || cols > MAX_RECTIFIED_DIM {
        return Err(StereoError::RectificationFailed("rectified image too large"));
    }
    frame.rows = rows;
    frame.cols = cols;
    let resample = |img: &ImageGray, view: View| {
        let samples: Vec<(u8, bool)> = (0..rows)
            .into_par_iter()
            .flat_map_iter(|r| {
                let frame = &frame;
                (0..cols).map(move |c| {
                    frame
                        .inverse_map(view, &Point2::new(c as f64, r as f64))
                        .and_then(|p| img.sample(p.u, p.v))
                        .map_or((0, false), |v| (v.round() as u8, true))
                })
            })
            .collect();
        let (vals, valid): (Vec<u8>, Vec<bool>) = samples.into_iter().unzip();
        (
            Raster::from_vec(cols, rows, vals).expect("sized above"),
            Raster::from_vec(cols, rows, valid).expect("sized above"),
        )
    };
    let (rect1, valid1) = resample(img1, View::First);
    let (rect2, valid2) = resample(img2, View::Second);
    Ok(RectifiedPair { rect1, rect2, valid1, valid2, frame })
}

impl RectifiedPair {
    pub fn rectify_matches(&self, matches: &[PixelMatch<f64>]) -> Vec<RectifiedMatch> {
        matches
            .iter()
            .map(|m| RectifiedMatch {
                first: self.frame.forward_map(View::First, &m.first),
                second: self.frame.forward_map(View::Second, &m.second),
            })
            .collect()
    }
}

/// Mirrors the second rectified image when strictly more than half of the
/// match pairs have opposite horizontal order in the two views.
pub fn order_check_and_mirror(mut pair: RectifiedPair, sparse: &[RectifiedMatch]) -> RectifiedPair {
    let (mut consistent, mut inverted) = (0usize, 0usize);
    for (i, a) in sparse.iter().enumerate() {
        for b in &sparse[i + 1..] {
            let s = (a.first.x - b.first.x) * (a.second.x - b.second.x);
            if s > 0.0 {
                consistent += 1;
            } else if s < 0.0 {
                inverted += 1;
            }
        }
    }
    if inverted > consistent {
        pair.rect2 = pair.rect2.flipped_horizontally();
        pair.valid2 = pair.valid2.flipped_horizontally();
        pair.frame.mirrored = !pair.frame.mirrored;
    }
    pair
}

/// Central 90% of the sparse disparities (by rank), widened by `margin`.
pub fn disparity_range(sparse: &[RectifiedMatch], margin: f64) -> Result<(f64, f64), StereoError> {
    const NEEDED: usize = 10;
    if sparse.len() < NEEDED {
        return Err(StereoError::TooFewMatches { found: sparse.len(), needed: NEEDED });
    }
    let mut d: Vec<f64> = sparse.iter().map(RectifiedMatch::disparity).filter(|v| v.is_finite()).collect();
    if d.len() < NEEDED {
        return Err(StereoError::TooFewMatches { found: d.len(), needed: NEEDED });
    }
    d.sort_by(f64::total_cmp);
    let cut = d.len() * 5 / 100;
    Ok((d[cut] - margin, d[d.len() - 1 - cut] + margin))
}

/// Per-pixel Census bitfields; neighbour `k` in row-major order (centre
/// skipped) is bit `n − 1 − k` of an `n`-bit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusImage {
    pub window: usize,
    pub bits: Raster<u64>,
    /// False within `window / 2` of the border.
    pub valid: Raster<bool>,
}

impl CensusImage {
    pub fn code_len(&self) -> u32 {
        (self.window * self.window - 1) as u32
    }
}

pub fn census_transform(img: &ImageGray, window: usize) -> CensusImage {
    assert!(window % 2 == 1 && (3..=7).contains(&window), "census window must be 3, 5 or 7");
    let r = (window / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let inside = |x: usize, y: usize| x as isize >= r && y as isize >= r && (x as isize) < w as isize - r && (y as isize) < h as isize - r;
    let bits = Raster::from_fn(w, h, |x, y| {
        if !inside(x, y) {
            return 0;
        }
        let c = img.get(x, y);
        let mut code = 0u64;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let q = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                code = (code << 1) | u64::from(q > c);
            }
        }
        code
    });
    CensusImage { window, bits, valid: Raster::from_fn(w, h, inside) }
}

/// Disparities in rectified pixels (`col₂ − col₁`).
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub values: Raster<f32>,
    pub valid: Raster<bool>,
    pub range: (f64, f64),
}

impl DisparityMap {
    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }

    /// Fixed-point 16-bit encoding `d·256 + 32768`; invalid pixels are 0.
    pub fn to_png16(&self) -> Raster<u16> {
        Raster::from_fn(self.values.width(), self.values.height(), |x, y| {
            if self.valid.get(x, y) {
                (self.values.get(x, y) as f64 * 256.0 + 32768.0).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
    }

    pub fn save_png16(&self, path: impl AsRef<std::path::Path>) -> Result<(), ImageError> {
        self.to_png16().save_png16(path)
    }
}

/// Occluded state in a DP path.
const OCC: i32 = i32::MIN;

/// Minimum-cost path through one row segment: each pixel `x` either takes
/// a disparity in `lo[x]..=hi[x]` with data cost `cost(x, d)` or is skipped
/// at cost `lam[x] + tau`. A step between consecutive disparities costs
/// `lam[x]·|d − d'|`; leaving a skip is free.
pub fn dp_row(lo: &[i32], hi: &[i32], lam: &[f64], tau: f64, cost: impl Fn(usize, i32) -> f64) -> (Vec<Option<i32>>, f64) {
    let n = lo.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let mut back: Vec<Vec<i32>> = Vec::with_capacity(n);
    let mut occ_back: Vec<i32> = Vec::with_capacity(n);
    let mut prev: Vec<f64> = (lo[0]..=hi[0]).map(|d| cost(0, d)).collect();
    let mut prev_occ = lam[0] + tau;
    back.push(vec![OCC; prev.len()]);
    occ_back.push(OCC);
    let mut g = Vec::new();
    let mut arg = Vec::new();
    for x in 1..n {
        let (plo, phi) = (lo[x - 1], hi[x - 1]);
        let (m0, m1) = (plo.min(lo[x]), phi.max(hi[x]));
        g.clear();
        arg.clear();
        for d in m0..=m1 {
            if (plo..=phi).contains(&d) {
                g.push(prev[(d - plo) as usize]);
            } else {
                g.push(f64::INFINITY);
            }
            arg.push(d);
        }
        let l = lam[x];
        for i in 1..g.len() {
            if g[i - 1] + l < g[i] {
                g[i] = g[i - 1] + l;
                arg[i] = arg[i - 1];
            }
        }
        for i in (0..g.len().saturating_sub(1)).rev() {
            if g[i + 1] + l < g[i] {
                g[i] = g[i + 1] + l;
                arg[i] = arg[i + 1];
            }
        }
        let (best_prev, best_prev_d) = prev
            .iter()
            .enumerate()
            .fold((f64::INFINITY, OCC), |acc, (i, &c)| if c < acc.0 { (c, plo + i as i32) } else { acc });
        let mut cur = Vec::with_capacity((hi[x] - lo[x] + 1) as usize);
        let mut bk = Vec::with_capacity(cur.capacity());
        for d in lo[x]..=hi[x] {
            let i = (d - m0) as usize;
            let (from, p) = if prev_occ < g[i] { (prev_occ, OCC) } else { (g[i], arg[i]) };
            cur.push(from + cost(x, d));
            bk.push(p);
        }
        let (occ_from, occ_p) = if prev_occ < best_prev { (prev_occ, OCC) } else { (best_prev, best_prev_d) };
        // OCC as a predecessor of an occluded pixel means "from occluded".
        occ_back.push(if occ_p == OCC { i32::MAX } else { occ_p });
        prev_occ = occ_from + l + tau;
        prev = cur;
        back.push(bk);
    }
    let (mut best, mut state) = (prev_occ, OCC);
    for (i, &c) in prev.iter().enumerate() {
        if c < best {
            best = c;
            state = lo[n - 1] + i as i32;
        }
    }
    let mut path = vec![None; n];
    for x in (0..n).rev() {
        if state == OCC {
            path[x] = None;
            if x > 0 {
                let p = occ_back[x];
                state = if p == i32::MAX { OCC } else { p };
            }
        } else {
            path[x] = Some(state);
            if x > 0 {
                state = back[x][(state - lo[x]) as usize];
            }
        }
    }
    (path, best)
}

/// Local intensity variance over a square window, clamped at the borders.
fn local_variance(img: &ImageGray, window: usize) -> Raster<f32> {
    let (w, h) = (img.width(), img.height());
    let mut s = vec![0f64; (w + 1) * (h + 1)];
    let mut s2 = vec![0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) as f64;
            let i = (y + 1) * (w + 1) + x + 1;
            s[i] = v + s[i - 1] + s[i - (w + 1)] - s[i - (w + 2)];
            s2[i] = v * v + s2[i - 1] + s2[i - (w + 1)] - s2[i - (w + 2)];
        }
    }
    let r = window / 2;
    Raster::from_fn(w, h, |x, y| {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
        let at = |a: &[f64], x: usize, y: usize| a[y * (w + 1) + x];
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let sum = at(&s, x1, y1) - at(&s, x0, y1) - at(&s, x1, y0) + at(&s, x0, y0);
        let sum2 = at(&s2, x1, y1) - at(&s2, x0, y1) - at(&s2, x1, y0) + at(&s2, x0, y0);
        let m = sum / n;
        (sum2 / n - m * m).max(0.0) as f32
    })
}

/// Inputs of one pyramid level.
struct Level {
    rect1: ImageGray,
    rect2: ImageGray,
    roi: Raster<bool>,
}

fn halve_mask(m: &Raster<bool>) -> Raster<bool> {
    let (w, h) = ((m.width() / 2).max(1), (m.height() / 2).max(1));
    Raster::from_fn(w, h, |x, y| {
        let (x1, y1) = ((2 * x + 1).min(m.width() - 1), (2 * y + 1).min(m.height() - 1));
        m.get(2 * x, 2 * y) || m.get(x1, 2 * y) || m.get(2 * x, y1) || m.get(x1, y1)
    })
}

/// Disparity (or invalid) per pixel of one level; `band(x, y)` gives the
/// inclusive search interval.
fn solve_level(
    level: &Level,
    band: &(dyn Fn(usize, usize) -> (i32, i32) + Sync),
    cfg: &StereoConfig,
) -> Raster<Option<i32>> {
    let c1 = census_transform(&level.rect1, cfg.census_window);
    let c2 = census_transform(&level.rect2, cfg.census_window);
    let var = local_variance(&level.rect1, cfg.aggregation_window);
    let (w, h) = (level.rect1.width(), level.rect1.height());
    let bits = c1.code_len() as f64;
    let r = (cfg.aggregation_window / 2) as isize;
    let area = (cfg.aggregation_window * cfg.aggregation_window) as f64;
    // Hamming distance, or `None` where a Census code is missing.
    let ham = |x: isize, y: isize, d: i32| -> Option<u32> {
        let x2 = x + d as isize;
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize || x2 < 0 || x2 >= w as isize {
            return None;
        }
        let (x, y, x2) = (x as usize, y as usize, x2 as usize);
        (c1.valid.get(x, y) && c2.valid.get(x2, y)).then(|| (c1.bits.get(x, y) ^ c2.bits.get(x2, y)).count_ones())
    };
    let rows: Vec<Vec<Option<i32>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = vec![None; w];
            let mut x = 0;
            while x < w {
                if !level.roi.get(x, y) {
                    x += 1;
                    continue;
                }
                let start = x;
                while x < w && level.roi.get(x, y) {
                    x += 1;
                }
                let seg = start..x;
                let (lo, hi): (Vec<i32>, Vec<i32>) = seg.clone().map(|x| band(x, y)).unzip();
                let ulo = *lo.iter().min().expect("non-empty segment");
                let uhi = *hi.iter().max().expect("non-empty segment");
                let nd = (uhi - ulo + 1) as usize;
                // Aggregated cost table over the segment and the union band.
                let (xa, xb) = (start as isize - r, x as isize + r);
                let mut table = vec![0f64; seg.len() * nd];
                // Aggregation windows with every code present.
                let mut complete = vec![false; seg.len() * nd];
                let mut colsum = vec![(0f64, 0u32); (xb - xa) as usize];
                let span = 2 * r as usize;
                for (k, d) in (ulo..=uhi).enumerate() {
                    for (i, cx) in (xa..xb).enumerate() {
                        colsum[i] = (-r..=r).fold((0.0, 0), |(s, m), dy| match ham(cx, y as isize + dy, d) {
                            Some(v) => (s + v as f64, m),
                            None => (s + bits, m + 1),
                        });
                    }
                    let (mut run, mut missing) =
                        colsum[..span].iter().fold((0.0, 0), |(s, m), &(a, b)| (s + a, m + b));
                    for i in 0..seg.len() {
                        run += colsum[i + span].0;
                        missing += colsum[i + span].1;
                        table[i * nd + k] = run / area;
                        complete[i * nd + k] = missing == 0;
                        run -= colsum[i].0;
                        missing -= colsum[i].1;
                    }
                }
                let lam: Vec<f64> = seg
                    .clone()
                    .map(|x| cfg.lambda0 / (1.0 + var.get(x, y) as f64 / (cfg.sigma0 * cfg.sigma0)))
                    .collect();
                let (path, _) =
                    dp_row(&lo, &hi, &lam, cfg.occlusion_cost, |i, d| table[i * nd + (d - ulo) as usize]);
                for (i, d) in path.into_iter().enumerate() {
                    let Some(d) = d else { continue };
                    if !complete[i * nd + (d - ulo) as usize] {
                        continue;
                    }
                    // Textureless pixels have a flat cost curve over their band.
                    let (mut mn, mut mx, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0);
                    for j in (lo[i] - ulo) as usize..=(hi[i] - ulo) as usize {
                        if complete[i * nd + j] {
                            mn = mn.min(table[i * nd + j]);
                            mx = mx.max(table[i * nd + j]);
                            n += 1;
                        }
                    }
                    if hi[i] > lo[i] && (n < 2 || mx - mn < 1e-9) {
                        continue;
                    }
                    out[start + i] = Some(d);
                }
            }
            out
        })
        .collect();
    Raster::from_vec(w, h, rows.into_iter().flatten().collect()).expect("sized above")
}

/// Hierarchical DP stereo over `roi` (a mask on the first rectified image).
pub fn dp_stereo(
    pair: &RectifiedPair,
    range: (f64, f64),
    roi: &Raster<bool>,
    cfg: &StereoConfig,
) -> Result<DisparityMap, StereoError> {
    cfg.validate()?;
    if !(range.0.is_finite() && range.1.is_finite() && range.0 <= range.1) {
        return Err(StereoError::EmptyRange);
    }
    let area = roi.as_slice().iter().filter(|v| **v).count();
    if area == 0 {
        return Err(StereoError::EmptyRoi);
    }
    let (w, h) = (pair.rect1.width(), pair.rect1.height());
    let s = (cfg.target_roi_area / area as f64).sqrt();
    let (ws, hs) = (((w as f64 * s).round() as usize).max(1), ((h as f64 * s).round() as usize).max(1));
    let (sx, sy) = (ws as f64 / w as f64, hs as f64 / h as f64);
    let roi_s = Raster::from_fn(ws, hs, |x, y| {
        let ox = (((x as f64 + 0.5) / sx - 0.5).round() as usize).min(w - 1);
        let oy = (((y as f64 + 0.5) / sy - 0.5).round() as usize).min(h - 1);
        roi.get(ox, oy)
    });
    let mut levels = vec![Level { rect1: pair.rect1.resized(ws, hs), rect2: pair.rect2.resized(ws, hs), roi: roi_s }];
    while levels.last().map(|l| l.rect1.width().min(l.rect1.height())).unwrap_or(0) >= cfg.pyramid_min_dim {
        let l = levels.last().expect("non-empty");
        let next = Level { rect1: l.rect1.halved(), rect2: l.rect2.halved(), roi: halve_mask(&l.roi) };
        levels.push(next);
    }
    let top = levels.len() - 1;
    let range_at = |k: usize| {
        let f = sx / (1u64 << k) as f64;
        ((range.0 * f).floor() as i32, (range.1 * f).ceil() as i32)
    };
    let full = range_at(top);
    let mut result = solve_level(&levels[top], &|_, _| full, cfg);
    for k in (0..top).rev() {
        let (glo, ghi) = range_at(k);
        let coarse = result;
        let band = cfg.pyramid_band;
        let (cw, ch) = (coarse.width(), coarse.height());
        let banded = move |x: usize, y: usize| match coarse.get((x / 2).min(cw - 1), (y / 2).min(ch - 1)) {
            Some(d) => {
                let c = 2 * d;
                let (lo, hi) = ((c - band).max(glo), (c + band).min(ghi));
                if lo <= hi {
                    (lo, hi)
                } else {
                    (glo, ghi)
                }
            }
            None => (glo, ghi),
        };
        result = solve_level(&levels[k], &banded, cfg);
    }

    let mut values = Raster::new(w, h, 0f32);
    let mut valid = Raster::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !roi.get(x, y) {
                continue;
            }
            let xs = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(ws - 1);
            let ys = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(hs - 1);
            if let Some(d) = result.get(xs, ys) {
                values.set(x, y, (d as f64 / sx) as f32);
                valid.set(x, y, true);
            }
        }
    }
    let (lo, hi) = range_at(0);
    Ok(DisparityMap { values, valid, range: (lo as f64 / sx, hi as f64 / sx) })
}

/// Median over the valid pixels of a `kernel × kernel` neighbourhood; the
/// validity mask is kept.
pub fn median_refine(d: &DisparityMap, kernel: usize) -> DisparityMap {
    let r = (kernel / 2) as isize;
    let (w, h) = (d.values.width(), d.values.height());
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut buf = Vec::with_capacity(kernel * kernel);
            (0..w)
                .map(|x| {
                    if !d.valid.get(x, y) {
                        return d.values.get(x, y);
                    }
                    buf.clear();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x as isize + dx, y as isize + dy);
                            if d.valid.get_checked(xx, yy) == Some(true) {
                                buf.push(d.values.get(xx as usize, yy as usize));
                            }
                        }
                    }
                    buf.sort_by(f32::total_cmp);
                    let n = buf.len();
                    if n % 2 == 1 {
                        buf[n / 2]
                    } else {
                        0.5 * (buf[n / 2 - 1] + buf[n / 2])
                    }
                })
                .collect()
        })
        .collect();
    DisparityMap {
        values: Raster::from_vec(w, h, rows.into_iter().flatten().collect()).expect("sized above"),
        valid: d.valid.clone(),
        range: d.range,
    }
}
