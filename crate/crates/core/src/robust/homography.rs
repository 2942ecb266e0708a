//! Planar homography estimation (normalized DLT) and its RANSAC estimator.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use super::{Estimator, Repairable, RobustError};

/// Point correspondence `src ↦ dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: Point2<f64>,
    pub dst: Point2<f64>,
}

impl Correspondence {
    pub fn new(src: Point2<f64>, dst: Point2<f64>) -> Self {
        Self { src, dst }
    }
}

/// Projective map of the plane with `‖H‖_F = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    /// Scales `matrix` to unit Frobenius norm with a non-negative `H₃₃` (or
    /// first non-zero entry).
    pub fn new(matrix: Matrix3<f64>) -> Option<Self> {
        let n = matrix.norm();
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        let mut m = matrix / n;
        let pivot = if m[(2, 2)].abs() > 1e-12 { m[(2, 2)] } else { *m.iter().find(|v| v.abs() > 1e-12)? };
        if pivot < 0.0 {
            m = -m;
        }
        Some(Self { matrix: m })
    }

    /// `None` when the point maps to infinity.
    pub fn apply(&self, p: &Point2<f64>) -> Option<Point2<f64>> {
        let q = self.matrix * p.to_homogeneous();
        if q.z.abs() < 1e-15 {
            return None;
        }
        Some(Point2::new(q.x / q.z, q.y / q.z))
    }

    pub fn inverse(&self) -> Option<Self> {
        self.matrix.try_inverse().and_then(Self::new)
    }

    /// Forward transfer error `|H·src − dst|`; `+∞` at infinity.
    pub fn transfer_error(&self, c: &Correspondence) -> f64 {
        self.apply(&c.src).map_or(f64::INFINITY, |q| (q - c.dst).norm())
    }
}

fn collinear(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> bool {
    let u = b - a;
    let v = c - a;
    let area = (u.x * v.y - u.y * v.x).abs();
    area <= 1e-9 * (u.norm() * v.norm()).max(f64::MIN_POSITIVE)
}

fn any_collinear_triple(p: &[Point2<f64>]) -> bool {
    let n = p.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if collinear(&p[i], &p[j], &p[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizer(p: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = p.len() as f64;
    let c = p.iter().fold(nalgebra::Vector2::zeros(), |a, q| a + q.coords) / n;
    let mean = p.iter().map(|q| (q.coords - c).norm()).sum::<f64>() / n;
    if !(mean > 0.0) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

/// Normalized DLT over `≥ 4` correspondences.
pub fn fit_homography(matches: &[Correspondence]) -> Option<Homography> {
    if matches.len() < 4 {
        return None;
    }
    let src: Vec<_> = matches.iter().map(|m| m.src).collect();
    let dst: Vec<_> = matches.iter().map(|m| m.dst).collect();
    let ts = normalizer(&src)?;
    let td = normalizer(&dst)?;
    let rows = 2 * matches.len();
    let mut a = DMatrix::<f64>::zeros(rows.max(9), 9);
    for (i, m) in matches.iter().enumerate() {
        let s: Vector3<f64> = ts * m.src.to_homogeneous();
        let d: Vector3<f64> = td * m.dst.to_homogeneous();
        let (x, y, w) = (s.x, s.y, s.z);
        let (u, v, t) = (d.x, d.y, d.z);
        let r0 = [0.0, 0.0, 0.0, -t * x, -t * y, -t * w, v * x, v * y, v * w];
        let r1 = [t * x, t * y, t * w, 0.0, 0.0, 0.0, -u * x, -u * y, -u * w];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = td.try_inverse()? * hn * ts;
    Homography::new(h)
}

/// Homography through four correspondences.
pub fn homography_solver(sample: &[Correspondence; 4]) -> Result<Homography, RobustError> {
    let src: Vec<_> = sample.iter().map(|m| m.src).collect();
    let dst: Vec<_> = sample.iter().map(|m| m.dst).collect();
    if any_collinear_triple(&src) || any_collinear_triple(&dst) {
        return Err(RobustError::DegenerateSample);
    }
    fit_homography(sample).ok_or(RobustError::DegenerateSample)
}

/// Homography fitting scored by forward transfer error in `dst` units.
#[derive(Debug, Clone, Copy, Default)]
pub struct HomographyEstimator;

impl Estimator for HomographyEstimator {
    type Datum = Correspondence;
    type Model = Homography;

    fn min_sample_size(&self) -> usize {
        4
    }

    fn fit_minimal(&self, sample: &[Correspondence]) -> Vec<Homography> {
        homography_solver(&[sample[0], sample[1], sample[2], sample[3]]).into_iter().collect()
    }

    fn fit_non_minimal(&self, sample: &[Correspondence]) -> Vec<Homography> {
        fit_homography(sample).into_iter().collect()
    }

    fn distance(&self, model: &Homography, datum: &Correspondence) -> f64 {
        model.transfer_error(datum)
    }
}

impl Repairable for HomographyEstimator {
    fn cross_pair(&self, a: &Correspondence, b: &Correspondence) -> Correspondence {
        Correspondence::new(a.src, b.dst)
    }
}
