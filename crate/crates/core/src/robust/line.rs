//! 2D line estimator, a minimal plug-in for exercising the engine.

use nalgebra::{Matrix2, Point2, Vector2};

use super::{Estimator, Repairable};

/// Line `{p : normal·p = offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub normal: Vector2<f64>,
    pub offset: f64,
}

impl Line {
    pub fn through(a: &Point2<f64>, b: &Point2<f64>) -> Option<Self> {
        let d = b - a;
        let n = Vector2::new(-d.y, d.x);
        let len = n.norm();
        if !(len > 1e-12) {
            return None;
        }
        let normal = n / len;
        Some(Self { normal, offset: normal.dot(&a.coords) })
    }

    /// `(slope, intercept)` of `y = slope·x + intercept`; `None` for vertical
    /// lines.
    pub fn slope_intercept(&self) -> Option<(f64, f64)> {
        if self.normal.y.abs() < 1e-12 {
            return None;
        }
        Some((-self.normal.x / self.normal.y, self.offset / self.normal.y))
    }

    pub fn distance(&self, p: &Point2<f64>) -> f64 {
        (self.normal.dot(&p.coords) - self.offset).abs()
    }
}

/// Orthogonal-distance line fitting of 2D points; a datum's two parts are
/// its x and y coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct LineEstimator;

impl Estimator for LineEstimator {
    type Datum = Point2<f64>;
    type Model = Line;

    fn min_sample_size(&self) -> usize {
        2
    }

    fn fit_minimal(&self, sample: &[Point2<f64>]) -> Vec<Line> {
        Line::through(&sample[0], &sample[1]).into_iter().collect()
    }

    /// Total least squares.
    fn fit_non_minimal(&self, sample: &[Point2<f64>]) -> Vec<Line> {
        if sample.len() < 2 {
            return Vec::new();
        }
        let n = sample.len() as f64;
        let c = sample.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
        let mut cov = Matrix2::zeros();
        for p in sample {
            let d = p.coords - c;
            cov += d * d.transpose();
        }
        let eig = cov.symmetric_eigen();
        let i = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
        let other = eig.eigenvalues[1 - i];
        if !(other > 1e-18) {
            return Vec::new();
        }
        let normal: Vector2<f64> = eig.eigenvectors.column(i).into_owned();
        vec![Line { normal, offset: normal.dot(&c) }]
    }

    fn distance(&self, model: &Line, datum: &Point2<f64>) -> f64 {
        model.distance(datum)
    }
}

impl Repairable for LineEstimator {
    fn cross_pair(&self, a: &Point2<f64>, b: &Point2<f64>) -> Point2<f64> {
        Point2::new(a.x, b.y)
    }
}
