//! Plane estimator over 3D points.

use nalgebra::{Matrix3, Point3, Vector3};

use super::{Estimator, RobustError};
use crate::geometry::Plane;

/// Plane through three points, oriented towards the camera.
pub fn plane_solver(sample: &[Point3<f64>; 3]) -> Result<Plane<f64>, RobustError> {
    let [a, b, c] = sample;
    let n = (b - a).cross(&(c - a));
    let scale = (b - a).norm() * (c - a).norm();
    if !(n.norm() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(RobustError::DegenerateSample);
    }
    Plane::through(a, n).map(Plane::facing_camera).ok_or(RobustError::DegenerateSample)
}

/// Least-squares plane through the centroid, oriented towards the camera.
pub fn fit_plane(points: &[Point3<f64>]) -> Option<Plane<f64>> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    // A line-like sample has two vanishing eigenvalues.
    if !(eig.eigenvalues[order[1]] > 1e-12 * eig.eigenvalues[order[2]].max(f64::MIN_POSITIVE)) {
        return None;
    }
    let normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    Plane::through(&Point3::from(c), normal).map(Plane::facing_camera)
}

/// Plane fitting with unsigned point-plane distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlaneEstimator;

impl Estimator for PlaneEstimator {
    type Datum = Point3<f64>;
    type Model = Plane<f64>;

    fn min_sample_size(&self) -> usize {
        3
    }

    fn fit_minimal(&self, sample: &[Point3<f64>]) -> Vec<Plane<f64>> {
        plane_solver(&[sample[0], sample[1], sample[2]]).into_iter().collect()
    }

    fn fit_non_minimal(&self, sample: &[Point3<f64>]) -> Vec<Plane<f64>> {
        fit_plane(sample).into_iter().collect()
    }

    fn distance(&self, model: &Plane<f64>, datum: &Point3<f64>) -> f64 {
        model.signed_distance(datum).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robust::{ransac, RansacConfig, ThresholdPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn axis_aligned_plane() {
        let p = plane_solver(&[Point3::new(0.0, 0.0, 5.0), Point3::new(1.0, 0.0, 5.0), Point3::new(0.0, 1.0, 5.0)]).unwrap();
        assert!((p.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((p.offset + 5.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_is_degenerate() {
        let s = [Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 1.0, 2.0), Point3::new(2.0, 2.0, 3.0)];
        assert_eq!(plane_solver(&s), Err(RobustError::DegenerateSample));
    }

    #[test]
    fn ransac_recovers_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        for _ in 0..100 {
            let x: f64 = rng.random_range(-5.0..5.0);
            let y: f64 = rng.random_range(-5.0..5.0);
            pts.push(Point3::new(x, y, 10.0 - x - y));
        }
        for _ in 0..10 {
            pts.push(Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(20.0..30.0)));
        }
        let r = ransac(&pts, &PlaneEstimator, &ThresholdPolicy::Fixed(1e-6), &RansacConfig::default(), 3).unwrap();
        let s = 1.0 / 3f64.sqrt();
        let truth = Plane::through(&Point3::new(0.0, 0.0, 10.0), Vector3::new(s, s, s)).unwrap().facing_camera();
        assert!((r.model.normal - truth.normal).norm() < 1e-6);
        assert!((r.model.offset - truth.offset).abs() < 1e-6);
        assert_eq!(r.inliers.len(), 100);
    }
}
