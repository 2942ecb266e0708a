//! Minimal five-point essential-matrix solver.
//!
//! The 4-dimensional nullspace of the epipolar constraints parameterizes
//! `E = x·X + y·Y + z·Z + W`. The rank and trace constraints give ten cubic
//! equations in `(x, y, z)`; Gauss–Jordan elimination of the cubic monomials
//! yields a 10×10 action matrix for multiplication by `x` on the quotient
//! basis `[x², xy, y², xz, yz, z², x, y, z, 1]`, whose real eigenvectors are
//! the solutions.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};

use super::RobustError;
use crate::geometry::{EssentialModel, NormalizedMatch};

/// Residual bound on `x₂ᵀ·E·x₁` for a unit-norm `E`.
pub const EPIPOLAR_TOL: f64 = 1e-8;
/// Bound on `|det E|` for a unit-norm `E`.
pub const DET_TOL: f64 = 1e-8;
/// Frobenius bound on `2·E·Eᵀ·E − tr(E·Eᵀ)·E` for a unit-norm `E`.
pub const TRACE_TOL: f64 = 1e-6;

/// Exponents `(x, y, z)` of the 20 monomials of degree ≤ 3, cubic block
/// first.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (2, 1, 0),
    (1, 2, 0),
    (0, 3, 0),
    (2, 0, 1),
    (1, 1, 1),
    (0, 2, 1),
    (1, 0, 2),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (0, 2, 0),
    (1, 0, 1),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

const fn monomial_index(e: (u8, u8, u8)) -> usize {
    let mut i = 0;
    while i < 20 {
        let m = MONOMIALS[i];
        if m.0 == e.0 && m.1 == e.1 && m.2 == e.2 {
            return i;
        }
        i += 1;
    }
    panic!("monomial degree above 3");
}

/// `PRODUCT[i][j]`: index of monomial i × monomial j, or `NONE` when the
/// degree exceeds 3.
const NONE: u8 = u8::MAX;
const PRODUCT: [[u8; 20]; 20] = {
    let mut t = [[NONE; 20]; 20];
    let mut i = 0;
    while i < 20 {
        let mut j = 0;
        while j < 20 {
            let a = MONOMIALS[i];
            let b = MONOMIALS[j];
            if a.0 + a.1 + a.2 + b.0 + b.1 + b.2 <= 3 {
                t[i][j] = monomial_index((a.0 + b.0, a.1 + b.1, a.2 + b.2)) as u8;
            }
            j += 1;
        }
        i += 1;
    }
    t
};

type Poly = [f64; 20];

fn mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = [0.0; 20];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            if bj == 0.0 {
                continue;
            }
            let k = PRODUCT[i][j];
            debug_assert!(k != NONE, "product degree above 3");
            out[k as usize] += ai * bj;
        }
    }
    out
}

fn add_assign(a: &mut Poly, b: &Poly) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn sub_assign(a: &mut Poly, b: &Poly) {
    for (x, y) in a.iter_mut().zip(b) {
        *x -= y;
    }
}

fn scale(a: &Poly, s: f64) -> Poly {
    a.map(|v| v * s)
}

type PolyMat = [[Poly; 3]; 3];

fn mat_mul(a: &PolyMat, b: &PolyMat) -> PolyMat {
    let mut out = [[[0.0; 20]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                add_assign(&mut out[i][j], &mul(&a[i][k], &b[k][j]));
            }
        }
    }
    out
}

fn transpose(a: &PolyMat) -> PolyMat {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[j][i];
        }
    }
    out
}

/// The 10×20 coefficient matrix of the nine trace equations and the
/// determinant, in the monomial order of [`MONOMIALS`].
fn constraint_matrix(basis: &[Matrix3<f64>; 4]) -> SMatrix<f64, 10, 20> {
    let x = monomial_index((1, 0, 0));
    let y = monomial_index((0, 1, 0));
    let z = monomial_index((0, 0, 1));
    let one = monomial_index((0, 0, 0));
    let mut e: PolyMat = [[[0.0; 20]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            e[i][j][x] = basis[0][(i, j)];
            e[i][j][y] = basis[1][(i, j)];
            e[i][j][z] = basis[2][(i, j)];
            e[i][j][one] = basis[3][(i, j)];
        }
    }
    let eet = mat_mul(&e, &transpose(&e));
    let mut trace = eet[0][0];
    add_assign(&mut trace, &eet[1][1]);
    add_assign(&mut trace, &eet[2][2]);
    let eete = mat_mul(&eet, &e);

    let mut m = SMatrix::<f64, 10, 20>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut p = scale(&eete[i][j], 2.0);
            sub_assign(&mut p, &mul(&trace, &e[i][j]));
            for (c, v) in p.iter().enumerate() {
                m[(3 * i + j, c)] = *v;
            }
        }
    }
    let c0 = {
        let mut a = mul(&e[1][1], &e[2][2]);
        sub_assign(&mut a, &mul(&e[1][2], &e[2][1]));
        a
    };
    let c1 = {
        let mut a = mul(&e[1][2], &e[2][0]);
        sub_assign(&mut a, &mul(&e[1][0], &e[2][2]));
        a
    };
    let c2 = {
        let mut a = mul(&e[1][0], &e[2][1]);
        sub_assign(&mut a, &mul(&e[1][1], &e[2][0]));
        a
    };
    let mut det = mul(&e[0][0], &c0);
    add_assign(&mut det, &mul(&e[0][1], &c1));
    add_assign(&mut det, &mul(&e[0][2], &c2));
    for (c, v) in det.iter().enumerate() {
        m[(9, c)] = *v;
    }
    m
}

/// Reduces the cubic block to the identity; returns the 10×10 block `B` of
/// `[I | B]`.
fn eliminate(mut m: SMatrix<f64, 10, 20>) -> Option<SMatrix<f64, 10, 10>> {
    let norm = m.amax();
    if !(norm > 0.0) {
        return None;
    }
    for col in 0..10 {
        let (piv, pv) = (col..10).map(|r| (r, m[(r, col)].abs())).max_by(|a, b| a.1.total_cmp(&b.1))?;
        if !(pv > 1e-12 * norm) {
            return None;
        }
        m.swap_rows(col, piv);
        let inv = 1.0 / m[(col, col)];
        for c in 0..20 {
            m[(col, c)] *= inv;
        }
        for r in 0..10 {
            if r != col {
                let f = m[(r, col)];
                if f != 0.0 {
                    for c in 0..20 {
                        m[(r, c)] -= f * m[(col, c)];
                    }
                }
            }
        }
    }
    Some(m.fixed_view::<10, 10>(0, 10).into_owned())
}

fn evaluate(m: &SMatrix<f64, 10, 20>, x: f64, y: f64, z: f64) -> (SVector<f64, 10>, SMatrix<f64, 10, 3>) {
    let mut val = SVector::<f64, 20>::zeros();
    let mut grad = SMatrix::<f64, 20, 3>::zeros();
    let pw = |b: f64, e: u8| if e == 0 { 1.0 } else { b.powi(e as i32) };
    for (k, &(a, b, c)) in MONOMIALS.iter().enumerate() {
        val[k] = pw(x, a) * pw(y, b) * pw(z, c);
        if a > 0 {
            grad[(k, 0)] = a as f64 * pw(x, a - 1) * pw(y, b) * pw(z, c);
        }
        if b > 0 {
            grad[(k, 1)] = b as f64 * pw(x, a) * pw(y, b - 1) * pw(z, c);
        }
        if c > 0 {
            grad[(k, 2)] = c as f64 * pw(x, a) * pw(y, b) * pw(z, c - 1);
        }
    }
    (m * val, m * grad)
}

/// Gauss–Newton polishing of a root of the constraint system.
fn polish(m: &SMatrix<f64, 10, 20>, mut p: [f64; 3]) -> [f64; 3] {
    let (mut r, mut j) = evaluate(m, p[0], p[1], p[2]);
    for _ in 0..4 {
        let Some(step) = (j.transpose() * j).try_inverse().map(|inv| inv * (j.transpose() * r)) else {
            break;
        };
        let q = [p[0] - step[0], p[1] - step[1], p[2] - step[2]];
        let (r2, j2) = evaluate(m, q[0], q[1], q[2]);
        if !(r2.norm() < r.norm()) {
            break;
        }
        p = q;
        r = r2;
        j = j2;
    }
    p
}

/// Epipolar constraint row for `E` stored row-major.
fn constraint_row(m: &NormalizedMatch<f64>) -> [f64; 9] {
    let (a, b) = (m.first, m.second);
    [b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0]
}

fn from_row_major(v: &[f64]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

/// True when a unit-norm `E` meets the essential-matrix and epipolar
/// tolerances on `sample`.
pub fn satisfies_constraints(e: &Matrix3<f64>, sample: &[NormalizedMatch<f64>]) -> bool {
    let em = EssentialModel::new(*e);
    let trace = 2.0 * e * e.transpose() * e - (e * e.transpose()).trace() * e;
    e.determinant().abs() < DET_TOL
        && trace.norm() < TRACE_TOL
        && sample.iter().all(|m| em.algebraic_residual(m).abs() < EPIPOLAR_TOL)
}

/// Essential matrices (unit Frobenius norm, at most 10) consistent with five
/// normalized matches.
pub fn five_point_solver(sample: &[NormalizedMatch<f64>]) -> Result<Vec<EssentialModel<f64>>, RobustError> {
    if sample.len() != 5 {
        return Err(RobustError::InsufficientData { needed: 5, got: sample.len() });
    }
    let mut a = DMatrix::<f64>::zeros(9, 9);
    for (i, m) in sample.iter().enumerate() {
        for (c, v) in constraint_row(m).iter().enumerate() {
            a[(i, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let s = &svd.singular_values;
    if !(s[4] > 1e-10 * s[0]) {
        return Err(RobustError::DegenerateSample);
    }
    let vt = svd.v_t.expect("right singular vectors requested");
    let basis = [5, 6, 7, 8].map(|r| from_row_major(vt.row(r).transpose().as_slice()));

    let m = constraint_matrix(&basis);
    let b = eliminate(m).ok_or(RobustError::DegenerateSample)?;

    // Rows of the action matrix: x·(basis monomial) in the quotient basis
    // [x², xy, y², xz, yz, z², x, y, z, 1].
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for (row, cubic) in [(0, 0), (1, 1), (2, 2), (3, 4), (4, 5), (5, 7)] {
        for c in 0..10 {
            action[(row, c)] = -b[(cubic, c)];
        }
    }
    action[(6, 0)] = 1.0;
    action[(7, 1)] = 1.0;
    action[(8, 3)] = 1.0;
    action[(9, 6)] = 1.0;

    let lambdas = action.complex_eigenvalues();
    let mut out: Vec<EssentialModel<f64>> = Vec::new();
    for l in lambdas.iter() {
        if l.im.abs() > 1e-8 * (1.0 + l.re.abs()) {
            continue;
        }
        let shifted = action - SMatrix::<f64, 10, 10>::identity() * l.re;
        let svd = shifted.svd(false, true);
        let v = svd.v_t.expect("right singular vectors requested").row(9).into_owned();
        if v[9].abs() < 1e-12 * v.norm() {
            continue;
        }
        let p = polish(&m, [v[6] / v[9], v[7] / v[9], v[8] / v[9]]);
        let e = basis[0] * p[0] + basis[1] * p[1] + basis[2] * p[2] + basis[3];
        let n = e.norm();
        if !(n > 0.0) || !n.is_finite() {
            continue;
        }
        let e = e / n;
        if !satisfies_constraints(&e, sample) {
            continue;
        }
        // A repeated eigenvalue yields the same solution twice.
        if out.iter().any(|o| (o.matrix - e).norm() < 1e-9 || (o.matrix + e).norm() < 1e-9) {
            continue;
        }
        out.push(EssentialModel::new(e));
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{rotation_from_axis_angle, RelativePose};
    use nalgebra::{Point2, Point3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn matches_for(pose: &RelativePose<f64>, n: usize, seed: u64) -> Vec<NormalizedMatch<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let p = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0));
            let q = pose.transform(&p);
            if q.z > 0.5 {
                out.push(NormalizedMatch::new(Point2::new(p.x / p.z, p.y / p.z), Point2::new(q.x / q.z, q.y / q.z)));
            }
        }
        out
    }

    fn contains(sols: &[EssentialModel<f64>], e: &Matrix3<f64>) -> bool {
        let e = e / e.norm();
        sols.iter().any(|s| (s.matrix - e).norm() < 1e-6 || (s.matrix + e).norm() < 1e-6)
    }

    #[test]
    fn pure_translation() {
        let pose = RelativePose::from_direction(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let m = matches_for(&pose, 5, 1);
        let sols = five_point_solver(&m).unwrap();
        assert!(contains(&sols, &pose.essential().matrix), "{sols:?}");
        for s in &sols {
            assert!(satisfies_constraints(&s.matrix, &m));
        }
    }

    #[test]
    fn general_pose_many_seeds() {
        let r = rotation_from_axis_angle(&Vector3::new(0.0, 10f64.to_radians(), 0.0));
        let pose = RelativePose::from_direction(r, Vector3::new(0.8, 0.0, 0.6));
        for seed in 0..50 {
            let m = matches_for(&pose, 5, seed);
            let sols = five_point_solver(&m).unwrap();
            assert!(sols.len() <= 10);
            assert!(contains(&sols, &pose.essential().matrix), "seed {seed}: {} solutions", sols.len());
        }
    }

    #[test]
    fn identical_matches_degenerate() {
        let m = NormalizedMatch::new(Point2::new(0.1, 0.2), Point2::new(0.3, 0.1));
        assert_eq!(five_point_solver(&[m; 5]), Err(RobustError::DegenerateSample));
    }

    #[test]
    fn monomial_table_consistency() {
        for (i, &(a, b, c)) in MONOMIALS.iter().enumerate() {
            assert_eq!(monomial_index((a, b, c)), i);
        }
        assert_eq!(PRODUCT[16][10] as usize, 0);
        assert_eq!(PRODUCT[16][14] as usize, 5);
    }
}
