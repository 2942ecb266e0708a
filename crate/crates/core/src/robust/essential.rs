//! Essential-matrix estimation: RANSAC plug-in, pose decomposition with a
//! chirality test, and Levenberg–Marquardt pose refinement.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use super::five_point::five_point_solver;
use super::{Estimator, Repairable, RobustError};
use crate::geometry::{
    rotation_from_axis_angle, symmetric_epipolar_distance, triangulate_normalized, EssentialModel, NormalizedMatch,
    RelativePose,
};

/// Symmetric epipolar distance, `+∞` where undefined.
pub fn epipolar_distance(e: &EssentialModel<f64>, m: &NormalizedMatch<f64>) -> f64 {
    symmetric_epipolar_distance(e, m).unwrap_or(f64::INFINITY)
}

/// Projects a 3×3 matrix onto the essential manifold (singular values
/// `(1, 1, 0)` up to scale).
pub fn project_to_essential(m: &Matrix3<f64>) -> Option<EssentialModel<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let s = svd.singular_values;
    let sigma = 0.5 * (s[0] + s[1]);
    if !(sigma > 0.0) {
        return None;
    }
    let e = u * Matrix3::from_diagonal(&Vector3::new(sigma, sigma, 0.0)) * vt;
    Some(EssentialModel::new(e).normalized())
}

/// Linear eight-point estimate over `≥ 8` matches, projected to the
/// essential manifold.
pub fn eight_point(matches: &[NormalizedMatch<f64>]) -> Option<EssentialModel<f64>> {
    if matches.len() < 8 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(matches.len().max(9), 9);
    for (i, m) in matches.iter().enumerate() {
        let (p, q) = (m.first, m.second);
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (c, v) in row.iter().enumerate() {
            a[(i, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let s = &svd.singular_values;
    if !(s[7] > 1e-12 * s[0]) {
        return None;
    }
    let v = svd.v_t?.row(8).into_owned();
    project_to_essential(&Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]))
}

/// Five-point minimal solver with eight-point non-minimal fits, scored by
/// symmetric epipolar distance in normalized image units.
#[derive(Debug, Clone, Copy, Default)]
pub struct FivePointEstimator;

impl Estimator for FivePointEstimator {
    type Datum = NormalizedMatch<f64>;
    type Model = EssentialModel<f64>;

    fn min_sample_size(&self) -> usize {
        5
    }

    fn fit_minimal(&self, sample: &[NormalizedMatch<f64>]) -> Vec<EssentialModel<f64>> {
        five_point_solver(sample).unwrap_or_default()
    }

    fn fit_non_minimal(&self, sample: &[NormalizedMatch<f64>]) -> Vec<EssentialModel<f64>> {
        if sample.len() >= 8 {
            eight_point(sample).into_iter().collect()
        } else {
            five_point_solver(&sample[..5]).unwrap_or_default()
        }
    }

    fn distance(&self, model: &EssentialModel<f64>, datum: &NormalizedMatch<f64>) -> f64 {
        epipolar_distance(model, datum)
    }
}

impl Repairable for FivePointEstimator {
    fn cross_pair(&self, a: &NormalizedMatch<f64>, b: &NormalizedMatch<f64>) -> NormalizedMatch<f64> {
        NormalizedMatch::new(a.first, b.second)
    }
}

/// Number of matches triangulating in front of both cameras.
pub fn count_in_front(pose: &RelativePose<f64>, matches: &[NormalizedMatch<f64>]) -> usize {
    matches
        .iter()
        .filter(|m| match triangulate_normalized(m, pose) {
            Ok(p) => p.z > 0.0 && pose.transform(&p).z > 0.0,
            Err(_) => false,
        })
        .count()
}

/// The four `(R, t)` factorizations of `E = [t]×·R`.
pub fn factorizations(e: &EssentialModel<f64>) -> Option<[RelativePose<f64>; 4]> {
    let svd = e.matrix.svd(true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into_owned();
    Some([
        RelativePose::from_direction(r1, t),
        RelativePose::from_direction(r1, -t),
        RelativePose::from_direction(r2, t),
        RelativePose::from_direction(r2, -t),
    ])
}

/// Factorization of `E` placing strictly the most matches in front of both
/// cameras.
pub fn decompose_essential(
    e: &EssentialModel<f64>,
    matches: &[NormalizedMatch<f64>],
) -> Result<RelativePose<f64>, RobustError> {
    if matches.is_empty() {
        return Err(RobustError::InsufficientData { needed: 1, got: 0 });
    }
    let cands = factorizations(e).ok_or(RobustError::DegenerateSample)?;
    let counts = cands.each_ref().map(|p| count_in_front(p, matches));
    let best = (0..4).max_by_key(|&i| counts[i]).expect("four candidates");
    let winners = counts.iter().filter(|&&c| c == counts[best]).count();
    if counts[best] == 0 || winners > 1 {
        return Err(RobustError::AmbiguousChirality);
    }
    Ok(cands[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stops when the relative cost decrease falls below this.
    pub relative_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { max_iterations: 100, relative_tolerance: 1e-10, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    /// Least-squares cost after each accepted step, starting with the
    /// initial cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
    /// `Σ` symmetric epipolar distance before and after refinement.
    pub initial_distance_sum: f64,
    pub final_distance_sum: f64,
}

/// Orthonormal basis of the plane orthogonal to the unit vector `t`.
fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&a).normalize();
    let b2 = t.cross(&b1);
    (b1, b2)
}

/// Pose for parameters `(w, az, el)` in the chart centred on `base`.
fn chart(base: &RelativePose<f64>, p: &SVector<f64, 5>) -> RelativePose<f64> {
    let r = rotation_from_axis_angle(&Vector3::new(p[0], p[1], p[2])) * base.rotation;
    let (b1, b2) = tangent_basis(&base.translation);
    let (az, el) = (p[3], p[4]);
    let t = base.translation * (el.cos() * az.cos()) + b1 * (el.cos() * az.sin()) + b2 * el.sin();
    RelativePose::from_direction(r, t).with_scale(base.scale)
}

/// Smoothing of the square-root residuals at zero distance.
const L1_EPS: f64 = 1e-9;

/// `s/√(|s|+ε)` for each signed point-to-epipolar-line distance `s`, two per
/// match, so that the squared norm is the summed symmetric distance.
fn residuals(pose: &RelativePose<f64>, matches: &[NormalizedMatch<f64>], out: &mut Vec<f64>) {
    let e = pose.essential().matrix;
    out.clear();
    for m in matches {
        let x1 = m.first.to_homogeneous();
        let x2 = m.second.to_homogeneous();
        let alg = x2.dot(&(e * x1));
        let l2 = e * x1;
        let l1 = e.transpose() * x2;
        let n2 = l2.fixed_rows::<2>(0).norm();
        let n1 = l1.fixed_rows::<2>(0).norm();
        for n in [n2, n1] {
            let d = if n > 0.0 { alg / n } else { 0.0 };
            out.push(d / (d.abs() + L1_EPS).sqrt());
        }
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn distance_sum(pose: &RelativePose<f64>, matches: &[NormalizedMatch<f64>]) -> f64 {
    let e = pose.essential();
    matches.iter().map(|m| epipolar_distance(&e, m)).sum()
}

/// Levenberg–Marquardt refinement of a pose over 5 parameters (rotation
/// increment and translation azimuth/elevation), minimizing the summed
/// symmetric epipolar distance.
///
/// Falls back to the input pose if the summed symmetric epipolar distance did
/// not decrease.
pub fn lm_refine(
    pose: &RelativePose<f64>,
    matches: &[NormalizedMatch<f64>],
    cfg: &LmConfig,
) -> Result<(RelativePose<f64>, LmReport), RobustError> {
    if matches.len() < 6 {
        return Err(RobustError::InsufficientData { needed: 6, got: matches.len() });
    }
    let mut current = *pose;
    let mut r = Vec::with_capacity(2 * matches.len());
    residuals(&current, matches, &mut r);
    let mut cost = sum_sq(&r);
    let mut costs = vec![cost];
    let mut mu = cfg.initial_damping;
    let mut iterations = 0;
    let mut rp = Vec::with_capacity(r.len());
    let mut rm = Vec::with_capacity(r.len());

    while iterations < cfg.max_iterations && cost > 0.0 {
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(r.len(), 5);
        for k in 0..5 {
            let h = 1e-7;
            let mut d = SVector::<f64, 5>::zeros();
            d[k] = h;
            residuals(&chart(&current, &d), matches, &mut rp);
            residuals(&chart(&current, &(-d)), matches, &mut rm);
            for i in 0..r.len() {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let jtj: SMatrix<f64, 5, 5> = (jac.transpose() * &jac).fixed_view::<5, 5>(0, 0).into_owned();
        let jtr: SVector<f64, 5> = (jac.transpose() * DMatrix::from_column_slice(r.len(), 1, &r))
            .fixed_view::<5, 1>(0, 0)
            .into_owned();

        let mut accepted = false;
        for _ in 0..20 {
            let mut a = jtj;
            for i in 0..5 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let cand = chart(&current, &step);
            residuals(&cand, matches, &mut rp);
            let c = sum_sq(&rp);
            if c < cost {
                current = cand;
                std::mem::swap(&mut r, &mut rp);
                let rel = (cost - c) / cost;
                cost = c;
                costs.push(cost);
                mu = (mu / 10.0).max(1e-12);
                accepted = true;
                if rel < cfg.relative_tolerance {
                    return Ok(finish(pose, current, matches, costs, iterations));
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(finish(pose, current, matches, costs, iterations))
}

fn finish(
    initial: &RelativePose<f64>,
    refined: RelativePose<f64>,
    matches: &[NormalizedMatch<f64>],
    costs: Vec<f64>,
    iterations: usize,
) -> (RelativePose<f64>, LmReport) {
    let before = distance_sum(initial, matches);
    let after = distance_sum(&refined, matches);
    let (pose, after) = if after <= before { (refined, after) } else { (*initial, before) };
    (pose, LmReport { costs, iterations, initial_distance_sum: before, final_distance_sum: after })
}
