//! Salient points: a SURF detector and descriptor on an integral image, and
//! exact symmetric nearest-neighbour matching with a distinctiveness test.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ImagePoint;
use crate::image::{ImageGray, IntegralImage, Raster};

/// Fewer detections than this signals an untextured input.
pub const MIN_FEATURES: usize = 20;
pub const DESCRIPTOR_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("only {found} salient points detected (need {MIN_FEATURES}); the image lacks texture")]
    TooFewFeatures { found: usize },
    #[error("image {width}x{height} is smaller than 64x64")]
    ImageTooSmall { width: usize, height: usize },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfConfig {
    pub octaves: usize,
    /// Sampling step of the first octave in pixels; doubles per octave.
    pub initial_step: usize,
    /// Minimum determinant-of-Hessian response, for intensities in `[0, 1]`.
    pub hessian_threshold: f64,
    /// Keeps only the strongest points when set.
    pub max_features: Option<usize>,
}

impl Default for SurfConfig {
    fn default() -> Self {
        Self { octaves: 3, initial_step: 1, hessian_threshold: 4e-4, max_features: Some(4000) }
    }
}

impl SurfConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(1..=4).contains(&self.octaves) {
            return Err(FeatureError::InvalidConfig("octaves must lie in 1..=4"));
        }
        if self.initial_step == 0 {
            return Err(FeatureError::InvalidConfig("initial_step must be positive"));
        }
        if !(self.hessian_threshold >= 0.0) {
            return Err(FeatureError::InvalidConfig("hessian_threshold must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SalientPoint {
    pub position: ImagePoint<f64>,
    /// Gaussian-equivalent scale in pixels.
    pub scale: f64,
    pub orientation: f64,
    pub response: f64,
    /// Sign of the Hessian trace (bright blob on dark ground when negative).
    pub laplacian_positive: bool,
}

/// L2-normalized 64-D SURF descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor(pub [f32; DESCRIPTOR_LEN]);

impl Descriptor {
    /// Normalizes `values`; a zero vector stays zero.
    pub fn from_values(mut values: [f32; DESCRIPTOR_LEN]) -> Self {
        let n = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in &mut values {
                *v = (*v as f64 / n) as f32;
            }
        }
        Self(values)
    }

    pub fn squared_distance(&self, other: &Self) -> f32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.squared_distance(other) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub point: SalientPoint,
    pub descriptor: Descriptor,
}

/// Filter side length of interval `i` in octave `o` (9, 15, 21, 27, then
/// 15, 27, 39, 51, …).
fn filter_size(o: usize, i: usize) -> usize {
    3 * ((1 << (o + 1)) * (i + 1) + 1)
}

struct ResponseLayer {
    width: usize,
    height: usize,
    step: usize,
    filter: usize,
    responses: Vec<f32>,
    laplacian: Vec<bool>,
}

impl ResponseLayer {
    fn build(ii: &IntegralImage, step: usize, filter: usize) -> Self {
        let width = ii.width() / step;
        let height = ii.height() / step;
        let b = ((filter - 1) / 2) as isize;
        let l = (filter / 3) as isize;
        let w = filter as isize;
        let inv_area = 1.0 / (w * w) as f64;
        let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..height)
            .into_par_iter()
            .map(|ar| {
                let mut resp = Vec::with_capacity(width);
                let mut lap = Vec::with_capacity(width);
                for ac in 0..width {
                    let r = (ar * step) as isize;
                    let c = (ac * step) as isize;
                    // box_sum takes (x, y, w, h) = (col, row, cols, rows).
                    let bs = |row: isize, col: isize, rows: isize, cols: isize| ii.box_sum(col, row, cols, rows);
                    let dxx = bs(r - l + 1, c - b, 2 * l - 1, w) - 3.0 * bs(r - l + 1, c - l / 2, 2 * l - 1, l);
                    let dyy = bs(r - b, c - l + 1, w, 2 * l - 1) - 3.0 * bs(r - l / 2, c - l + 1, l, 2 * l - 1);
                    let dxy = bs(r - l, c + 1, l, l) + bs(r + 1, c - l, l, l)
                        - bs(r - l, c - l, l, l)
                        - bs(r + 1, c + 1, l, l);
                    let (dxx, dyy, dxy) = (dxx * inv_area, dyy * inv_area, dxy * inv_area);
                    resp.push((dxx * dyy - 0.81 * dxy * dxy) as f32);
                    lap.push(dxx + dyy >= 0.0);
                }
                (resp, lap)
            })
            .collect();
        let mut responses = Vec::with_capacity(width * height);
        let mut laplacian = Vec::with_capacity(width * height);
        for (r, l) in rows {
            responses.extend(r);
            laplacian.extend(l);
        }
        Self { width, height, step, filter, responses, laplacian }
    }

    /// Response at layer coordinates of the layer `scale_ref` (which may use
    /// a finer step).
    #[inline]
    fn response_at(&self, r: usize, c: usize, scale_ref: &ResponseLayer) -> f32 {
        let s = scale_ref.width / self.width.max(1);
        let s = s.max(1);
        let rr = (r / s).min(self.height - 1);
        let cc = (c / s).min(self.width - 1);
        self.responses[rr * self.width + cc]
    }
}

fn to_unit_float(img: &ImageGray) -> Raster<f32> {
    img.map(|v| v as f32 / 255.0)
}

/// Detects SURF points (sorted by descending response) and computes their
/// descriptors.
pub fn detect_and_describe(img: &ImageGray, cfg: &SurfConfig) -> Result<Vec<Feature>, FeatureError> {
    cfg.validate()?;
    if img.width() < 64 || img.height() < 64 {
        return Err(FeatureError::ImageTooSmall { width: img.width(), height: img.height() });
    }
    let ii = IntegralImage::new(&to_unit_float(img));
    let mut points = detect(&ii, cfg);
    points.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.position.v.total_cmp(&b.position.v))
            .then(a.position.u.total_cmp(&b.position.u))
    });
    if let Some(max) = cfg.max_features {
        points.truncate(max);
    }
    if points.len() < MIN_FEATURES {
        return Err(FeatureError::TooFewFeatures { found: points.len() });
    }
    Ok(points
        .into_par_iter()
        .map(|mut p| {
            p.orientation = orientation(&ii, &p);
            Feature { descriptor: describe(&ii, &p), point: p }
        })
        .collect())
}

fn detect(ii: &IntegralImage, cfg: &SurfConfig) -> Vec<SalientPoint> {
    let mut out = Vec::new();
    for o in 0..cfg.octaves {
        let step = cfg.initial_step << o;
        if ii.width() / step < 3 || ii.height() / step < 3 {
            break;
        }
        let layers: Vec<ResponseLayer> = (0..4).map(|i| ResponseLayer::build(ii, step, filter_size(o, i))).collect();
        for k in 0..2 {
            let (b, m, t) = (&layers[k], &layers[k + 1], &layers[k + 2]);
            let border = (t.filter + 1) / (2 * t.step);
            let found: Vec<SalientPoint> = (border + 1..t.height.saturating_sub(border + 1))
                .into_par_iter()
                .flat_map_iter(|r| {
                    (border + 1..t.width.saturating_sub(border + 1))
                        .filter_map(|c| extremum(r, c, t, m, b, cfg.hessian_threshold))
                        .collect::<Vec<_>>()
                })
                .collect();
            out.extend(found);
        }
    }
    out.retain(|p| {
        p.position.u >= 0.0
            && p.position.v >= 0.0
            && p.position.u <= (ii.width() - 1) as f64
            && p.position.v <= (ii.height() - 1) as f64
    });
    out
}

fn extremum(
    r: usize,
    c: usize,
    t: &ResponseLayer,
    m: &ResponseLayer,
    b: &ResponseLayer,
    threshold: f64,
) -> Option<SalientPoint> {
    let candidate = m.response_at(r, c, t);
    if (candidate as f64) < threshold {
        return None;
    }
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let rr = (r as isize + dr) as usize;
            let cc = (c as isize + dc) as usize;
            if t.response_at(rr, cc, t) >= candidate
                || ((dr != 0 || dc != 0) && m.response_at(rr, cc, t) >= candidate)
                || b.response_at(rr, cc, t) >= candidate
            {
                return None;
            }
        }
    }
    interpolate(r, c, t, m, b)
}

/// Quadratic sub-sample refinement in `(x, y, scale)`; rejects points whose
/// offset leaves the sample cell.
fn interpolate(r: usize, c: usize, t: &ResponseLayer, m: &ResponseLayer, b: &ResponseLayer) -> Option<SalientPoint> {
    let at = |l: &ResponseLayer, dr: isize, dc: isize| {
        l.response_at((r as isize + dr) as usize, (c as isize + dc) as usize, t) as f64
    };
    let v = at(m, 0, 0);
    let dx = (at(m, 0, 1) - at(m, 0, -1)) / 2.0;
    let dy = (at(m, 1, 0) - at(m, -1, 0)) / 2.0;
    let ds = (at(t, 0, 0) - at(b, 0, 0)) / 2.0;
    let dxx = at(m, 0, 1) + at(m, 0, -1) - 2.0 * v;
    let dyy = at(m, 1, 0) + at(m, -1, 0) - 2.0 * v;
    let dss = at(t, 0, 0) + at(b, 0, 0) - 2.0 * v;
    let dxy = (at(m, 1, 1) - at(m, 1, -1) - at(m, -1, 1) + at(m, -1, -1)) / 4.0;
    let dxs = (at(t, 0, 1) - at(t, 0, -1) - at(b, 0, 1) + at(b, 0, -1)) / 4.0;
    let dys = (at(t, 1, 0) - at(t, -1, 0) - at(b, 1, 0) + at(b, -1, 0)) / 4.0;
    let h = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
    let off = -(h.try_inverse()? * nalgebra::Vector3::new(dx, dy, ds));
    if off.iter().any(|o| o.abs() >= 0.5) {
        return None;
    }
    let step = t.step as f64;
    let filter_step = (m.filter - b.filter) as f64;
    let laplacian_positive = {
        let s = t.width / m.width.max(1);
        let s = s.max(1);
        m.laplacian[(r / s).min(m.height - 1) * m.width + (c / s).min(m.width - 1)]
    };
    Some(SalientPoint {
        position: ImagePoint::new((c as f64 + off.x) * step, (r as f64 + off.y) * step),
        scale: 0.1333 * (m.filter as f64 + off.z * filter_step),
        orientation: 0.0,
        response: v,
        laplacian_positive,
    })
}

/// Horizontal Haar response of half-size `h` centred on a pixel: the right
/// `h` columns minus the left `h` columns over `2h + 1` rows. The centre
/// column is excluded so the wavelet is antisymmetric about the pixel, which
/// keeps responses exact under 90° image rotations.
#[inline]
fn haar_x(ii: &IntegralImage, row: isize, col: isize, h: isize) -> f64 {
    ii.box_sum(col + 1, row - h, h, 2 * h + 1) - ii.box_sum(col - h, row - h, h, 2 * h + 1)
}

#[inline]
fn haar_y(ii: &IntegralImage, row: isize, col: isize, h: isize) -> f64 {
    ii.box_sum(col - h, row + 1, 2 * h + 1, h) - ii.box_sum(col - h, row - h, 2 * h + 1, h)
}

fn gaussian(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
}

/// Dominant gradient direction: Haar responses in a radius-6s disc, summed
/// over a 60° window sliding in 5° steps.
fn orientation(ii: &IntegralImage, p: &SalientPoint) -> f64 {
    let s = p.scale;
    let (x, y) = (p.position.u, p.position.v);
    let haar = ((2.0 * s).round() as isize).max(1);
    let mut samples = Vec::with_capacity(113);
    for i in -6i32..=6 {
        for j in -6i32..=6 {
            if i * i + j * j >= 36 {
                continue;
            }
            let w = gaussian(i as f64, j as f64, 2.5);
            let col = (x + i as f64 * s).round() as isize;
            let row = (y + j as f64 * s).round() as isize;
            let gx = w * haar_x(ii, row, col, haar);
            let gy = w * haar_y(ii, row, col, haar);
            samples.push((gy.atan2(gx), gx, gy));
        }
    }
    let mut best = (0.0, 0.0, 0.0);
    let mut a = 0.0f64;
    while a < 2.0 * PI {
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(ang, gx, gy) in &samples {
            if (ang - a).rem_euclid(2.0 * PI) < PI / 3.0 {
                sx += gx;
                sy += gy;
            }
        }
        let m = sx * sx + sy * sy;
        if m > best.0 {
            best = (m, sx, sy);
        }
        a += PI / 36.0;
    }
    if best.0 > 0.0 {
        best.2.atan2(best.1)
    } else {
        0.0
    }
}

/// 4×4 subregions of 5×5 Haar samples over a 20s window aligned with the
/// orientation; each subregion contributes `(Σdx, Σdy, Σ|dx|, Σ|dy|)`.
fn describe(ii: &IntegralImage, p: &SalientPoint) -> Descriptor {
    let s = p.scale;
    let (x, y) = (p.position.u, p.position.v);
    let (sin, cos) = p.orientation.sin_cos();
    let haar = (s.round() as isize).max(1);
    let mut v = [0f32; DESCRIPTOR_LEN];
    for sy in 0..4 {
        for sx in 0..4 {
            let mut acc = [0f64; 4];
            for ky in 0..5 {
                for kx in 0..5 {
                    // Sample centre in the oriented frame, in units of s.
                    let u = (sx * 5 + kx) as f64 - 9.5;
                    let w = (sy * 5 + ky) as f64 - 9.5;
                    let px = x + s * (u * cos - w * sin);
                    let py = y + s * (u * sin + w * cos);
                    let g = gaussian(u, w, 3.3);
                    let (row, col) = (py.round() as isize, px.round() as isize);
                    let hx = haar_x(ii, row, col, haar);
                    let hy = haar_y(ii, row, col, haar);
                    let dx = g * (hx * cos + hy * sin);
                    let dy = g * (-hx * sin + hy * cos);
                    acc[0] += dx;
                    acc[1] += dy;
                    acc[2] += dx.abs();
                    acc[3] += dy.abs();
                }
            }
            let k = 4 * (sy * 4 + sx);
            for (i, a) in acc.iter().enumerate() {
                v[k + i] = *a as f32;
            }
        }
    }
    Descriptor::from_values(v)
}

/// A pair `(first, second)` of indices into the two descriptor lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub first: usize,
    pub second: usize,
    pub distance: f64,
}

/// Injective matches between two feature lists, ordered by `first`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same pairs with the roles of the two lists exchanged.
    pub fn swapped(&self) -> Self {
        let mut pairs: Vec<Match> =
            self.pairs.iter().map(|m| Match { first: m.second, second: m.first, distance: m.distance }).collect();
        pairs.sort_by_key(|m| m.first);
        Self { pairs }
    }
}

struct Neighbours {
    best: usize,
    d1: f32,
    d2: f32,
}

/// Exact nearest and second-nearest neighbours (squared distances); ties
/// resolve to the lowest index.
fn nearest(queries: &[Descriptor], pool: &[Descriptor]) -> Vec<Neighbours> {
    queries
        .par_iter()
        .map(|q| {
            let mut n = Neighbours { best: usize::MAX, d1: f32::INFINITY, d2: f32::INFINITY };
            for (j, p) in pool.iter().enumerate() {
                let d = q.squared_distance(p);
                if d < n.d1 {
                    n.d2 = n.d1;
                    n.d1 = d;
                    n.best = j;
                } else if d < n.d2 {
                    n.d2 = d;
                }
            }
            n
        })
        .collect()
}

/// `d₂ / d₁` on Euclidean distances, with `0/0 = 1` and a missing second
/// neighbour counting as infinitely distinct.
fn ratio(n: &Neighbours) -> f64 {
    let d1 = (n.d1 as f64).sqrt();
    let d2 = (n.d2 as f64).sqrt();
    if d2.is_infinite() {
        f64::INFINITY
    } else if d1 == 0.0 {
        if d2 == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        d2 / d1
    }
}

/// Pairs that are mutual nearest neighbours and pass the distinctiveness
/// ratio `d₂/d₁ ≥ distinctiveness` in both directions.
pub fn match_symmetric(a: &[Descriptor], b: &[Descriptor], distinctiveness: f64) -> MatchSet {
    if a.is_empty() || b.is_empty() {
        return MatchSet::default();
    }
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let pairs = ab
        .iter()
        .enumerate()
        .filter(|(i, n)| ba[n.best].best == *i && ratio(n) >= distinctiveness && ratio(&ba[n.best]) >= distinctiveness)
        .map(|(i, n)| Match { first: i, second: n.best, distance: (n.d1 as f64).sqrt() })
        .collect();
    MatchSet { pairs }
}

pub fn descriptors(features: &[Feature]) -> Vec<Descriptor> {
    features.iter().map(|f| f.descriptor).collect()
}
