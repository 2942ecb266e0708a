//! Pinhole projection, triangulation, epipolar distances and planes.
//!
//! Everything is expressed in the first camera's frame. A [`RelativePose`]
//! maps first-camera coordinates into the second camera:
//! `x₂ = R·x₁ + t·scale`, with `t` a unit vector until the metric scale is
//! known.

use nalgebra::{Matrix3, Point2, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera")]
    PointBehindCamera,
    #[error("viewing rays are (nearly) parallel")]
    DegenerateRays,
    #[error("both epipolar lines are degenerate")]
    DegenerateLine,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Pixel position: `u` to the right, `v` downwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> ImagePoint<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.as_f64().is_finite() && self.v.as_f64().is_finite()
    }
}

/// A pair of corresponding pixels in the first and second image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMatch<T> {
    pub first: ImagePoint<T>,
    pub second: ImagePoint<T>,
}

/// A correspondence in normalized image coordinates (`K⁻¹` applied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedMatch<T: nalgebra::Scalar> {
    pub first: Point2<T>,
    pub second: Point2<T>,
}

impl<T: Real> NormalizedMatch<T> {
    pub fn new(first: Point2<T>, second: Point2<T>) -> Self {
        Self { first, second }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be non-zero"));
        }
        let w = T::lit(self.width as f64);
        let h = T::lit(self.height as f64);
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let z = T::zero();
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, T::one())
    }

    pub fn inverse_matrix(&self) -> Matrix3<T> {
        let z = T::zero();
        let one = T::one();
        Matrix3::new(
            one / self.fx,
            z,
            -self.cx / self.fx,
            z,
            one / self.fy,
            -self.cy / self.fy,
            z,
            z,
            one,
        )
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, p: &ImagePoint<T>) -> Point2<T> {
        Point2::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }

    pub fn denormalize(&self, x: &Point2<T>) -> ImagePoint<T> {
        ImagePoint::new(self.fx * x.x + self.cx, self.fy * x.y + self.cy)
    }

    /// Intrinsics of the same camera after resampling the image by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        let w = (T::lit(self.width as f64) * factor).as_f64().round().max(1.0) as u32;
        let h = (T::lit(self.height as f64) * factor).as_f64().round().max(1.0) as u32;
        // Pixel centres stay pixel centres: (c + ½)·s − ½.
        let half = T::lit(0.5);
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + half) * factor - half,
            cy: (self.cy + half) * factor - half,
            width: w,
            height: h,
        }
    }

    pub fn contains(&self, p: &ImagePoint<T>) -> bool {
        let w = T::lit(self.width as f64);
        let h = T::lit(self.height as f64);
        p.u >= T::zero() && p.v >= T::zero() && p.u < w && p.v < h
    }
}

/// Rigid transform from the first camera frame into the second one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose<T: nalgebra::Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    /// Millimetres per model unit; 1 until the metric scale is recovered.
    pub scale: T,
}

impl<T: Real> RelativePose<T> {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), scale: T::one() }
    }

    /// Builds a pose with a unit-norm translation direction and scale 1.
    pub fn from_direction(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        let n = translation.norm();
        let translation = if n > T::zero() { translation / n } else { translation };
        Self { rotation, translation, scale: T::one() }
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    /// Metric translation `t·scale`.
    pub fn baseline(&self) -> Vector3<T> {
        self.translation * self.scale
    }

    pub fn transform(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.baseline())
    }

    /// Centre of the second camera in the first camera frame.
    pub fn second_center(&self) -> Point3<T> {
        Point3::from(-(self.rotation.transpose() * self.baseline()))
    }

    pub fn essential(&self) -> EssentialModel<T> {
        EssentialModel::new(skew(&self.translation) * self.rotation)
    }
}

/// Essential matrix relating normalized points: `x₂ᵀ·E·x₁ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssentialModel<T: nalgebra::Scalar> {
    pub matrix: Matrix3<T>,
}

impl<T: Real> EssentialModel<T> {
    pub fn new(matrix: Matrix3<T>) -> Self {
        Self { matrix }
    }

    /// The same model scaled to unit Frobenius norm.
    pub fn normalized(&self) -> Self {
        let n = self.matrix.norm();
        if n > T::zero() {
            Self::new(self.matrix / n)
        } else {
            *self
        }
    }

    /// Algebraic epipolar residual `x₂ᵀ·E·x₁`.
    pub fn algebraic_residual(&self, m: &NormalizedMatch<T>) -> T {
        let x1 = m.first.to_homogeneous();
        let x2 = m.second.to_homogeneous();
        x2.dot(&(self.matrix * x1))
    }
}

/// Oriented plane `{p : normal·p = offset}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane<T: nalgebra::Scalar> {
    pub normal: Vector3<T>,
    pub offset: T,
}

impl<T: Real> Plane<T> {
    /// Creates a plane, rescaling `normal` to unit length. Returns `None` for
    /// a zero normal.
    pub fn new(normal: Vector3<T>, offset: T) -> Option<Self> {
        let n = normal.norm();
        if !(n > T::zero()) {
            return None;
        }
        Some(Self { normal: normal / n, offset: offset / n })
    }

    pub fn through(point: &Point3<T>, normal: Vector3<T>) -> Option<Self> {
        let n = normal.norm();
        if !(n > T::zero()) {
            return None;
        }
        let normal = normal / n;
        Some(Self { normal, offset: normal.dot(&point.coords) })
    }

    /// Flips the orientation so that the normal points towards the camera
    /// centre (the origin), i.e. into the −z hemisphere for planes in front
    /// of the camera.
    pub fn facing_camera(self) -> Self {
        // The origin lies on the positive side iff -offset > 0.
        let flip = if self.offset == T::zero() {
            self.normal.z > T::zero()
        } else {
            self.offset > T::zero()
        };
        if flip {
            Self { normal: -self.normal, offset: -self.offset }
        } else {
            self
        }
    }

    pub fn signed_distance(&self, p: &Point3<T>) -> T {
        point_plane_distance(p, self)
    }

    /// Orthogonal projection of `p` onto the plane.
    pub fn project(&self, p: &Point3<T>) -> Point3<T> {
        p - self.normal * self.signed_distance(p)
    }
}

/// Cross-product matrix `[v]×`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Projects a first-camera point into the camera described by `k` and `pose`.
pub fn project<T: Real>(
    p: &Point3<T>,
    k: &CameraIntrinsics<T>,
    pose: &RelativePose<T>,
) -> Result<ImagePoint<T>, GeometryError> {
    let q = pose.transform(p);
    if !(q.z > T::zero()) {
        return Err(GeometryError::PointBehindCamera);
    }
    Ok(ImagePoint::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy))
}

/// Minimum angle between the two viewing rays accepted by triangulation.
pub const MIN_TRIANGULATION_ANGLE: f64 = 1e-4;

/// Midpoint triangulation of a pixel match.
pub fn triangulate<T: Real>(
    m: &PixelMatch<T>,
    k1: &CameraIntrinsics<T>,
    k2: &CameraIntrinsics<T>,
    pose: &RelativePose<T>,
) -> Result<Point3<T>, GeometryError> {
    let x1 = k1.normalize(&m.first);
    let x2 = k2.normalize(&m.second);
    triangulate_normalized(&NormalizedMatch::new(x1, x2), pose)
}

/// Midpoint of the shortest segment between the two unprojected rays, in the
/// first camera frame.
pub fn triangulate_normalized<T: Real>(
    m: &NormalizedMatch<T>,
    pose: &RelativePose<T>,
) -> Result<Point3<T>, GeometryError> {
    let c2 = pose.second_center().coords;
    let d1 = m.first.to_homogeneous().normalize();
    let d2 = (pose.rotation.transpose() * m.second.to_homogeneous()).normalize();

    let cos = d1.dot(&d2).min(T::one()).max(-T::one());
    if !(cos.acos() > T::lit(MIN_TRIANGULATION_ANGLE)) {
        return Err(GeometryError::DegenerateRays);
    }
    let baseline = c2.norm();
    if !(baseline > T::default_epsilon() * T::lit(1e3)) {
        return Err(GeometryError::DegenerateRays);
    }

    // Minimise |λ₁·d₁ − (c₂ + λ₂·d₂)|² over λ₁, λ₂ (unit directions).
    let b = d1.dot(&d2);
    let e = d1.dot(&c2);
    let f = d2.dot(&c2);
    let denom = T::one() - b * b;
    let l1 = (e - b * f) / denom;
    let l2 = (b * e - f) / denom;
    let p1 = d1 * l1;
    let p2 = c2 + d2 * l2;
    Ok(Point3::from((p1 + p2) * T::lit(0.5)))
}

/// Angle between the two viewing rays of a normalized match, in radians.
pub fn triangulation_angle<T: Real>(m: &NormalizedMatch<T>, pose: &RelativePose<T>) -> T {
    let d1 = m.first.to_homogeneous().normalize();
    let d2 = (pose.rotation.transpose() * m.second.to_homogeneous()).normalize();
    d1.dot(&d2).min(T::one()).max(-T::one()).acos()
}

/// Euclidean distance from a point to a homogeneous line. `None` when the
/// line has no direction (`a = b = 0`).
fn point_line_distance<T: Real>(p: &Point2<T>, line: &Vector3<T>) -> Option<T> {
    let n = Vector2::new(line.x, line.y).norm();
    if !(n > T::zero()) {
        return None;
    }
    Some((line.x * p.x + line.y * p.y + line.z).abs() / n)
}

/// `d(x₂, E·x₁) + d(x₁, Eᵀ·x₂)` in normalized image units.
///
/// A single degenerate line (`E·x₁ = 0`, the point is the epipole)
/// contributes nothing; a line at infinity contributes `+∞`.
pub fn symmetric_epipolar_distance<T: Real>(
    e: &EssentialModel<T>,
    m: &NormalizedMatch<T>,
) -> Result<T, GeometryError> {
    let x1 = m.first.to_homogeneous();
    let x2 = m.second.to_homogeneous();
    let l2 = e.matrix * x1;
    let l1 = e.matrix.transpose() * x2;
    let d2 = point_line_distance(&m.second, &l2);
    let d1 = point_line_distance(&m.first, &l1);
    let degenerate = |l: &Vector3<T>| if l.z == T::zero() { T::zero() } else { T::lit(f64::INFINITY) };
    match (d1, d2) {
        (None, None) => Err(GeometryError::DegenerateLine),
        (Some(a), Some(b)) => Ok(a + b),
        (Some(a), None) => Ok(a + degenerate(&l2)),
        (None, Some(b)) => Ok(b + degenerate(&l1)),
    }
}

/// Signed distance `normal·p − offset`.
pub fn point_plane_distance<T: Real>(p: &Point3<T>, pl: &Plane<T>) -> T {
    pl.normal.dot(&p.coords) - pl.offset
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let angle = w.norm();
    if angle < T::lit(1e-12) {
        return Matrix3::identity() + skew(w);
    }
    nalgebra::Rotation3::from_scaled_axis(*w).into_inner()
}

/// Angle of the relative rotation `a·bᵀ`, in radians.
pub fn rotation_angle_between<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let r = a * b.transpose();
    let c = ((r.trace() - T::one()) * T::lit(0.5)).min(T::one()).max(-T::one());
    c.acos()
}

/// Angle between two direction vectors, in radians.
pub fn direction_angle<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let c = a.normalize().dot(&b.normalize()).min(T::one()).max(-T::one());
    c.acos()
}
