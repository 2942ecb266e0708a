//! Synthetic dishes with exact ground truth.
//!
//! World frame: the table is the plane `z = 0`, `z` points up, lengths are
//! millimetres. A plate is a height field over an ellipse (flat bottom, a
//! sloped wall, a flat rim lip and a vertical outer edge); food items are
//! height fields standing on the plate bottom. Everything is textured with
//! seeded multi-octave value noise and rendered by a z-buffer rasterizer over
//! a fine grid; the table outside the plate is intersected analytically.

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, RelativePose};
use crate::image::{ImageGray, Raster};

/// Label of the plate in segmentation maps; food items start at 2.
pub const PLATE_LABEL: u8 = 1;
pub const FIRST_ITEM_LABEL: u8 = 2;
/// Maximum angle between a camera's viewing direction and the vertical.
pub const MAX_CAMERA_TILT_DEG: f64 = 45.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateSpec {
    /// Outer semi-axes along world x and y.
    pub semi_axes_mm: [f64; 2],
    /// Height of the flat bottom above the table.
    pub bottom_height_mm: f64,
    pub rim_height_mm: f64,
    /// Width of the flat rim lip inside the outer edge.
    pub rim_width_mm: f64,
    /// Horizontal extent of the wall between bottom and lip.
    pub wall_width_mm: f64,
}

impl Default for PlateSpec {
    fn default() -> Self {
        Self {
            semi_axes_mm: [120.0, 120.0],
            bottom_height_mm: 10.0,
            rim_height_mm: 20.0,
            rim_width_mm: 12.0,
            wall_width_mm: 18.0,
        }
    }
}

impl PlateSpec {
    fn min_axis(&self) -> f64 {
        self.semi_axes_mm[0].min(self.semi_axes_mm[1])
    }

    /// Normalized elliptical radius; 1 on the outer edge.
    fn rho(&self, x: f64, y: f64) -> f64 {
        ((x / self.semi_axes_mm[0]).powi(2) + (y / self.semi_axes_mm[1]).powi(2)).sqrt()
    }

    fn bottom_limit(&self) -> f64 {
        1.0 - (self.rim_width_mm + self.wall_width_mm) / self.min_axis()
    }

    fn lip_limit(&self) -> f64 {
        1.0 - self.rim_width_mm / self.min_axis()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rho(x, y) <= 1.0
    }

    /// True when `(x, y)` lies on the flat bottom.
    pub fn on_bottom(&self, x: f64, y: f64) -> bool {
        self.rho(x, y) <= self.bottom_limit()
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let r = self.rho(x, y);
        let (b, l) = (self.bottom_limit(), self.lip_limit());
        if r > 1.0 {
            0.0
        } else if r >= l {
            self.rim_height_mm
        } else if r > b {
            self.bottom_height_mm + (self.rim_height_mm - self.bottom_height_mm) * (r - b) / (l - b)
        } else {
            self.bottom_height_mm
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let [a, b] = self.semi_axes_mm;
        if !(a > 0.0 && b > 0.0) {
            return Err(invalid("plate semi-axes must be positive"));
        }
        if !(self.bottom_height_mm >= 0.0 && self.rim_height_mm >= self.bottom_height_mm) {
            return Err(invalid("plate heights must satisfy 0 ≤ bottom ≤ rim"));
        }
        if !(self.rim_width_mm > 0.0 && self.wall_width_mm > 0.0 && self.bottom_limit() > 0.1) {
            return Err(invalid("plate rim and wall leave no flat bottom"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ItemShape {
    Hemisphere { radius_mm: f64 },
    /// Upper half of an ellipsoid with horizontal semi-axes `a`, `b` and
    /// height `c`.
    Dome { semi_axes_mm: [f64; 3] },
    /// Cuboid of `[length, width, height]`, rotated by `yaw_deg` about z.
    Box {
        size_mm: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoodItem {
    pub center_mm: [f64; 2],
    pub shape: ItemShape,
}

impl FoodItem {
    /// Height above the plate bottom at a world position.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center_mm[0], y - self.center_mm[1]);
        match &self.shape {
            ItemShape::Hemisphere { radius_mm: r } => {
                let q = r * r - dx * dx - dy * dy;
                if q > 0.0 {
                    q.sqrt()
                } else {
                    0.0
                }
            }
            ItemShape::Dome { semi_axes_mm: [a, b, c] } => {
                let q = 1.0 - (dx / a).powi(2) - (dy / b).powi(2);
                if q > 0.0 {
                    c * q.sqrt()
                } else {
                    0.0
                }
            }
            ItemShape::Box { size_mm: [l, w, h], yaw_deg } => {
                let (s, c) = yaw_deg.to_radians().sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if u.abs() <= l / 2.0 && v.abs() <= w / 2.0 {
                    *h
                } else {
                    0.0
                }
            }
        }
    }

    /// Radius of a disc around the centre containing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match &self.shape {
            ItemShape::Hemisphere { radius_mm } => *radius_mm,
            ItemShape::Dome { semi_axes_mm: [a, b, _] } => a.max(*b),
            ItemShape::Box { size_mm: [l, w, _], .. } => 0.5 * (l * l + w * w).sqrt(),
        }
    }

    /// Footprint-aligned frame: rotation about z and half extents.
    pub fn footprint_frame(&self) -> (f64, f64, f64) {
        match &self.shape {
            ItemShape::Hemisphere { radius_mm } => (0.0, *radius_mm, *radius_mm),
            ItemShape::Dome { semi_axes_mm: [a, b, _] } => (0.0, *a, *b),
            ItemShape::Box { size_mm: [l, w, _], yaw_deg } => (yaw_deg.to_radians(), l / 2.0, w / 2.0),
        }
    }

    /// Closed-form volume in millilitres.
    pub fn closed_form_volume_ml(&self) -> f64 {
        let mm3 = match &self.shape {
            ItemShape::Hemisphere { radius_mm: r } => 2.0 / 3.0 * std::f64::consts::PI * r.powi(3),
            ItemShape::Dome { semi_axes_mm: [a, b, c] } => 2.0 / 3.0 * std::f64::consts::PI * a * b * c,
            ItemShape::Box { size_mm: [l, w, h], .. } => l * w * h,
        };
        mm3 / 1000.0
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = match &self.shape {
            ItemShape::Hemisphere { radius_mm } => *radius_mm > 0.0,
            ItemShape::Dome { semi_axes_mm } => semi_axes_mm.iter().all(|v| *v > 0.0),
            ItemShape::Box { size_mm, yaw_deg } => size_mm.iter().all(|v| *v > 0.0) && yaw_deg.is_finite(),
        };
        if ok && self.center_mm.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(invalid("food item dimensions must be positive and finite"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CardSpec {
    pub center_mm: [f64; 2],
    #[serde(default)]
    pub yaw_deg: f64,
    pub width_mm: f64,
    pub height_mm: f64,
}

impl Default for CardSpec {
    fn default() -> Self {
        Self { center_mm: [185.0, 0.0], yaw_deg: 90.0, width_mm: 85.6, height_mm: 53.98 }
    }
}

impl CardSpec {
    /// Card coordinates in mm (origin at the top-left corner, u along the
    /// width) of a table point; `None` off the card.
    pub fn local(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center_mm[0], y - self.center_mm[1]);
        let u = c * dx + s * dy + self.width_mm / 2.0;
        let v = -(-s * dx + c * dy) + self.height_mm / 2.0;
        (u >= 0.0 && v >= 0.0 && u <= self.width_mm && v <= self.height_mm).then_some((u, v))
    }

    /// World point of card coordinates `(u, v)`.
    pub fn world(&self, u: f64, v: f64) -> Point3<f64> {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        let lu = u - self.width_mm / 2.0;
        let lv = -(v - self.height_mm / 2.0);
        Point3::new(self.center_mm[0] + c * lu - s * lv, self.center_mm[1] + s * lu + c * lv, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    pub seed: u64,
    /// Peak-to-peak albedo variation in gray levels.
    pub contrast: f64,
    /// Finest noise cell size in mm.
    pub feature_size_mm: f64,
    /// Standard deviation of additive sensor noise in gray levels.
    pub sensor_noise: f64,
    /// Adds view-dependent highlights.
    pub specular: bool,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self { seed: 1, contrast: 110.0, feature_size_mm: 1.2, sensor_noise: 1.0, specular: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub position_mm: [f64; 3],
    pub look_at_mm: [f64; 3],
}

impl CameraSpec {
    /// Camera at `distance` from `target`, tilted `tilt_deg` from the
    /// vertical towards azimuth `azimuth_deg`.
    pub fn orbit(target: [f64; 3], distance: f64, tilt_deg: f64, azimuth_deg: f64) -> Self {
        let (st, ct) = tilt_deg.to_radians().sin_cos();
        let (sa, ca) = azimuth_deg.to_radians().sin_cos();
        Self {
            position_mm: [target[0] + distance * st * ca, target[1] + distance * st * sa, target[2] + distance * ct],
            look_at_mm: target,
        }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.position_mm)
    }

    fn forward(&self) -> Vector3<f64> {
        (Point3::from(self.look_at_mm) - self.center()).normalize()
    }

    /// World-to-camera rotation: image x along `forward × world_y`, image y
    /// along `forward × x`, optical axis along `forward`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let f = self.forward();
        let x = f.cross(&Vector3::y()).normalize();
        let y = f.cross(&x);
        Matrix3::from_rows(&[x.transpose(), y.transpose(), f.transpose()])
    }

    pub fn tilt_deg(&self) -> f64 {
        self.forward().dot(&-Vector3::z()).clamp(-1.0, 1.0).acos().to_degrees()
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * (p - self.center()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub plate: Option<PlateSpec>,
    #[serde(default)]
    pub items: Vec<FoodItem>,
    #[serde(default)]
    pub card: Option<CardSpec>,
    #[serde(default)]
    pub texture: TextureSpec,
    pub cameras: Vec<CameraSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if let Some(p) = &self.plate {
            p.validate()?;
        }
        if !self.items.is_empty() && self.plate.is_none() {
            return Err(invalid("food items need a plate"));
        }
        if self.items.len() > (u8::MAX - FIRST_ITEM_LABEL) as usize {
            return Err(invalid("too many food items"));
        }
        for (i, item) in self.items.iter().enumerate() {
            item.validate()?;
            let plate = self.plate.as_ref().expect("checked above");
            let r = item.footprint_radius();
            let [cx, cy] = item.center_mm;
            let inside = (0..32).all(|k| {
                let a = k as f64 * std::f64::consts::TAU / 32.0;
                plate.on_bottom(cx + r * a.cos(), cy + r * a.sin())
            });
            if !inside {
                return Err(invalid(format!("item {i} does not fit on the plate bottom")));
            }
            for (j, other) in self.items.iter().enumerate().skip(i + 1) {
                let d = ((cx - other.center_mm[0]).powi(2) + (cy - other.center_mm[1]).powi(2)).sqrt();
                if d <= r + other.footprint_radius() {
                    return Err(invalid(format!("items {i} and {j} overlap")));
                }
            }
        }
        if let Some(c) = &self.card {
            if !(c.width_mm > 0.0 && c.height_mm > 0.0) {
                return Err(invalid("card dimensions must be positive"));
            }
            if let Some(p) = &self.plate {
                let corners = [(0.0, 0.0), (c.width_mm, 0.0), (0.0, c.height_mm), (c.width_mm, c.height_mm)];
                if corners.iter().any(|&(u, v)| {
                    let w = c.world(u, v);
                    p.contains(w.x, w.y)
                }) {
                    return Err(invalid("card overlaps the plate"));
                }
            }
        }
        if self.cameras.is_empty() {
            return Err(invalid("at least one camera required"));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            if !(cam.position_mm[2] > 0.0) {
                return Err(invalid(format!("camera {i} is not above the table")));
            }
            let f = Point3::from(cam.look_at_mm) - cam.center();
            if !(f.norm() > 0.0) {
                return Err(invalid(format!("camera {i} looks at its own position")));
            }
            if cam.tilt_deg() > MAX_CAMERA_TILT_DEG {
                return Err(invalid(format!(
                    "camera {i} is {:.1}° from vertical (limit {MAX_CAMERA_TILT_DEG}°)",
                    cam.tilt_deg()
                )));
            }
        }
        if self.texture.contrast < 40.0 {
            return Err(invalid("texture contrast below 40 gray levels"));
        }
        if !(self.texture.feature_size_mm > 0.0 && self.texture.sensor_noise >= 0.0) {
            return Err(invalid("texture feature size must be positive and noise non-negative"));
        }
        Ok(())
    }
}

/// Pixel density of the generated card pattern.
pub const CARD_PATTERN_PX_PER_MM: f64 = 3.0;

/// A validated scene with its card artwork.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub card_pattern: Option<ImageGray>,
}

pub fn make_scene(spec: SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let card_pattern = spec.card.as_ref().map(|c| card_pattern(c.width_mm, c.height_mm, spec.texture.seed ^ 0xca4d));
    Ok(Scene { spec, card_pattern })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64) ^ splitmix((j as u64) ^ splitmix(k as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in `[0, 1)` with unit lattice spacing.
fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let f = p.map(f64::floor);
    let t = [smooth(p[0] - f[0]), smooth(p[1] - f[1]), smooth(p[2] - f[2])];
    let (i, j, k) = (f[0] as i64, f[1] as i64, f[2] as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - t[2]), (1, t[2])] {
        for (dy, wy) in [(0, 1.0 - t[1]), (1, t[1])] {
            for (dx, wx) in [(0, 1.0 - t[0]), (1, t[0])] {
                acc += wx * wy * wz * lattice(seed, i + dx, j + dy, k + dz);
            }
        }
    }
    acc
}

/// Four-octave noise in `[0, 1)`, finest cell `cell`.
fn fractal_noise(seed: u64, p: [f64; 3], cell: f64) -> f64 {
    let mut acc = 0.0;
    let mut norm = 0.0;
    for o in 0..4 {
        let s = cell * (1u32 << o) as f64;
        let w = 1.0 + 0.3 * o as f64;
        acc += w * value_noise(seed.wrapping_add(o as u64 * 7919), [p[0] / s, p[1] / s, p[2] / s]);
        norm += w;
    }
    acc / norm
}

/// Contrast stretch of octave noise, which concentrates around 0.5.
fn albedo(seed: u64, p: [f64; 3], cell: f64, contrast: f64, base: f64) -> f64 {
    let n = fractal_noise(seed, p, cell);
    (base + contrast * 2.2 * (n - 0.5)).clamp(5.0, 250.0)
}

/// High-texture card artwork at [`CARD_PATTERN_PX_PER_MM`].
pub fn card_pattern(width_mm: f64, height_mm: f64, seed: u64) -> ImageGray {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_dots = (width_mm * height_mm / 22.0).round() as usize;
    let dots: Vec<(f64, f64, f64, f64)> = (0..n_dots)
        .map(|i| {
            let level = if i % 2 == 0 { 25.0 } else { 230.0 };
            (rng.random_range(0.0..width_mm), rng.random_range(0.0..height_mm), rng.random_range(1.0..2.6), level)
        })
        .collect();
    let w = (width_mm * CARD_PATTERN_PX_PER_MM).round() as usize;
    let h = (height_mm * CARD_PATTERN_PX_PER_MM).round() as usize;
    let px = 1.0 / CARD_PATTERN_PX_PER_MM;
    Raster::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 * px, y as f64 * px);
        let mut g = 128.0 + 80.0 * (fractal_noise(seed, [u, v, 0.0], 2.0) - 0.5);
        for &(cx, cy, r, level) in &dots {
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            // One-pixel antialiased edge.
            let a = ((r - d) / px + 0.5).clamp(0.0, 1.0);
            g += a * (level - g);
        }
        g.round().clamp(0.0, 255.0) as u8
    })
}

/// One rendered view with exact per-pixel ground truth.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: ImageGray,
    /// Camera-frame depth in mm of the surface seen at each pixel centre.
    pub depth: Raster<f32>,
    pub labels: Raster<u8>,
}

impl Scene {
    pub fn surface_height(&self, x: f64, y: f64) -> f64 {
        match &self.spec.plate {
            None => 0.0,
            Some(p) => p.height(x, y) + self.spec.items.iter().map(|it| it.height(x, y)).sum::<f64>(),
        }
    }

    /// Segmentation label of the surface above a table position.
    pub fn label_at(&self, x: f64, y: f64) -> u8 {
        let Some(p) = &self.spec.plate else { return 0 };
        if let Some(i) = self.spec.items.iter().position(|it| it.height(x, y) > 0.0) {
            return FIRST_ITEM_LABEL + i as u8;
        }
        if p.contains(x, y) {
            PLATE_LABEL
        } else {
            0
        }
    }

    fn shade(&self, w: &Point3<f64>, cam: &CameraSpec) -> f64 {
        let t = &self.spec.texture;
        let on_table = self.label_at(w.x, w.y) == 0;
        let (mut a, normal) = if on_table {
            let a = match (&self.spec.card, &self.card_pattern) {
                (Some(c), Some(pat)) => c.local(w.x, w.y).and_then(|(u, v)| {
                    pat.sample(u * CARD_PATTERN_PX_PER_MM, v * CARD_PATTERN_PX_PER_MM)
                }),
                _ => None,
            };
            let a = a.unwrap_or_else(|| albedo(t.seed ^ 0x7ab1e, [w.x, w.y, 0.0], 2.0 * t.feature_size_mm, 0.6 * t.contrast, 110.0));
            (a, Vector3::z())
        } else {
            let label = self.label_at(w.x, w.y);
            let (seed, base) = if label >= FIRST_ITEM_LABEL {
                (t.seed.wrapping_add(101 * label as u64), 150.0)
            } else {
                (t.seed ^ 0x9147e, 170.0)
            };
            let a = albedo(seed, [w.x, w.y, w.z], t.feature_size_mm, t.contrast, base);
            let e = 0.25;
            let gx = (self.surface_height(w.x + e, w.y) - self.surface_height(w.x - e, w.y)) / (2.0 * e);
            let gy = (self.surface_height(w.x, w.y + e) - self.surface_height(w.x, w.y - e)) / (2.0 * e);
            (a, Vector3::new(-gx, -gy, 1.0).normalize())
        };
        let light = Vector3::new(0.3, -0.2, 1.0).normalize();
        let lambert = normal.dot(&light).max(0.0);
        a *= 0.45 + 0.55 * lambert;
        if t.specular {
            let view = (cam.center() - w).normalize();
            let half = (view + light).normalize();
            a += 120.0 * normal.dot(&half).max(0.0).powi(60);
        }
        a
    }

    /// Renders camera `index` with intrinsics `k`.
    pub fn render(&self, index: usize, k: &CameraIntrinsics<f64>) -> RenderedView {
        let cam = &self.spec.cameras[index];
        let (w, h) = (k.width as usize, k.height as usize);
        let mut depth = Raster::new(w, h, f32::INFINITY);
        if let Some(p) = &self.spec.plate {
            self.rasterize_plate(p, cam, k, &mut depth);
        }
        let r = cam.rotation();
        let c = cam.center();
        let rt = r.transpose();
        let mut image = Raster::new(w, h, 0u8);
        let mut labels = Raster::new(w, h, 0u8);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.texture.seed ^ splitmix(index as u64 + 1));
        let noise = Normal::new(0.0, self.spec.texture.sensor_noise.max(1e-12)).expect("finite sigma");
        for y in 0..h {
            for x in 0..w {
                let ray_c = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let mut z = depth.get(x, y) as f64;
                if !z.is_finite() {
                    // Table plane: (c + z·Rᵀ·ray).z = 0.
                    let d = rt * ray_c;
                    z = if d.z < 0.0 { -c.z / d.z } else { f64::INFINITY };
                }
                if !z.is_finite() {
                    depth.set(x, y, f32::INFINITY);
                    continue;
                }
                let wp = c + rt * (ray_c * z);
                depth.set(x, y, z as f32);
                labels.set(x, y, self.label_at(wp.x, wp.y));
                let mut v = self.shade(&wp, cam);
                if self.spec.texture.sensor_noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                image.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        RenderedView { image, depth, labels }
    }

    /// Z-buffers the plate height field over a 0.5 mm grid covering the
    /// plate's bounding box.
    fn rasterize_plate(&self, p: &PlateSpec, cam: &CameraSpec, k: &CameraIntrinsics<f64>, depth: &mut Raster<f32>) {
        let step = 0.5;
        let [a, b] = p.semi_axes_mm;
        let nx = ((2.0 * a + 4.0) / step).ceil() as usize + 1;
        let ny = ((2.0 * b + 4.0) / step).ceil() as usize + 1;
        let x0 = -a - 2.0;
        let y0 = -b - 2.0;
        let mut verts: Vec<Option<(f64, f64, f64)>> = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (x0 + i as f64 * step, y0 + j as f64 * step);
                let q = cam.to_camera(&Point3::new(x, y, self.surface_height(x, y)));
                verts.push((q.z > 1.0).then(|| (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy, q.z)));
            }
        }
        let (w, h) = (depth.width() as f64, depth.height() as f64);
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let id = |di: usize, dj: usize| verts[(j + dj) * nx + i + di];
                let (Some(v00), Some(v10), Some(v01), Some(v11)) = (id(0, 0), id(1, 0), id(0, 1), id(1, 1)) else {
                    continue;
                };
                for tri in [[v00, v10, v11], [v00, v11, v01]] {
                    raster_triangle(&tri, w, h, depth);
                }
            }
        }
    }
}

fn raster_triangle(t: &[(f64, f64, f64); 3], w: f64, h: f64, depth: &mut Raster<f32>) {
    let minx = t.iter().map(|v| v.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let maxx = t.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w - 1.0);
    let miny = t.iter().map(|v| v.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let maxy = t.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h - 1.0);
    if minx > maxx || miny > maxy {
        return;
    }
    let area = (t[1].0 - t[0].0) * (t[2].1 - t[0].1) - (t[2].0 - t[0].0) * (t[1].1 - t[0].1);
    if area.abs() < 1e-12 {
        return;
    }
    let edge = |a: &(f64, f64, f64), b: &(f64, f64, f64), x: f64, y: f64| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
    let mut y = miny;
    while y <= maxy {
        let mut x = minx;
        while x <= maxx {
            let l0 = edge(&t[1], &t[2], x, y) / area;
            let l1 = edge(&t[2], &t[0], x, y) / area;
            let l2 = edge(&t[0], &t[1], x, y) / area;
            if l0 >= -1e-12 && l1 >= -1e-12 && l2 >= -1e-12 {
                let inv_z = l0 / t[0].2 + l1 / t[1].2 + l2 / t[2].2;
                let z = (1.0 / inv_z) as f32;
                let (xi, yi) = (x as usize, y as usize);
                if z < depth.get(xi, yi) {
                    depth.set(xi, yi, z);
                }
            }
            x += 1.0;
        }
        y += 1.0;
    }
}

/// Ground truth of a scene for a camera pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub items: Vec<TruthItem>,
    /// Relative pose of camera `second` w.r.t. camera `first`, with the
    /// baseline in mm as scale.
    pub pose: RelativePose<f64>,
    pub scale_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthItem {
    pub label: u8,
    pub volume_ml: f64,
}

/// Pose mapping camera-`a` coordinates to camera-`b` coordinates.
pub fn relative_pose(a: &CameraSpec, b: &CameraSpec) -> RelativePose<f64> {
    let (r1, r2) = (a.rotation(), b.rotation());
    let t = r2 * (a.center() - b.center());
    let scale = t.norm();
    RelativePose::from_direction(r2 * r1.transpose(), t).with_scale(scale)
}

pub fn ground_truth(scene: &Scene, first: usize, second: usize) -> GroundTruth {
    let pose = relative_pose(&scene.spec.cameras[first], &scene.spec.cameras[second]);
    let items = analytic_item_volumes(&scene.spec)
        .into_iter()
        .enumerate()
        .map(|(i, v)| TruthItem { label: FIRST_ITEM_LABEL + i as u8, volume_ml: v })
        .collect();
    GroundTruth { items, scale_mm: pose.scale, pose }
}

/// Midpoint-rule integral of one item's height field over its bounding box.
pub fn integrate_item(item: &FoodItem, step: f64) -> f64 {
    let (yaw, hu, hv) = item.footprint_frame();
    let (s, c) = yaw.sin_cos();
    let nu = (2.0 * hu / step).ceil() as usize;
    let nv = (2.0 * hv / step).ceil() as usize;
    let (du, dv) = (2.0 * hu / nu as f64, 2.0 * hv / nv as f64);
    let mut acc = 0.0;
    for j in 0..nv {
        let v = -hv + (j as f64 + 0.5) * dv;
        let mut row = 0.0;
        for i in 0..nu {
            let u = -hu + (i as f64 + 0.5) * du;
            row += item.height(item.center_mm[0] + c * u - s * v, item.center_mm[1] + s * u + c * v);
        }
        acc += row;
    }
    acc * du * dv / 1000.0
}

/// Numeric per-item volumes in mL at a 0.1 mm step (at most 3000 samples
/// per side).
pub fn analytic_item_volumes(spec: &SceneSpec) -> Vec<f64> {
    spec.items
        .iter()
        .map(|it| integrate_item(it, (0.1f64).max(2.0 * it.footprint_radius() / 3000.0)))
        .collect()
}

/// Total food volume in mL.
pub fn analytic_volume(spec: &SceneSpec) -> f64 {
    analytic_item_volumes(spec).iter().sum()
}

/// Intrinsics used by the generated scenes.
pub fn default_intrinsics() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(800.0, 800.0, 399.5, 299.5, 800, 600).expect("valid constants")
}

/// Kinds of generated test scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Hemisphere,
    Box,
    Dome,
    TwoItems,
}

/// A randomized dish with a card, seen by two cameras at 450–550 mm whose
/// viewing directions differ by `relative_angle_deg`.
pub fn generated_scene(kind: SceneKind, relative_angle_deg: f64, seed: u64) -> SceneSpec {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plate = PlateSpec {
        semi_axes_mm: [rng.random_range(110.0..125.0), rng.random_range(105.0..120.0)],
        ..PlateSpec::default()
    };
    let mut jitter = |s: f64| [rng.random_range(-s..s), rng.random_range(-s..s)];
    let j0 = jitter(15.0);
    let j1 = jitter(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let items = match kind {
        SceneKind::Hemisphere => {
            vec![FoodItem { center_mm: j0, shape: ItemShape::Hemisphere { radius_mm: rng.random_range(25.0..40.0) } }]
        }
        SceneKind::Box => vec![FoodItem {
            center_mm: j0,
            shape: ItemShape::Box {
                size_mm: [rng.random_range(45.0..70.0), rng.random_range(35.0..55.0), rng.random_range(15.0..30.0)],
                yaw_deg: rng.random_range(0.0..90.0),
            },
        }],
        SceneKind::Dome => vec![FoodItem {
            center_mm: j0,
            shape: ItemShape::Dome {
                semi_axes_mm: [rng.random_range(30.0..45.0), rng.random_range(25.0..40.0), rng.random_range(15.0..30.0)],
            },
        }],
        SceneKind::TwoItems => vec![
            FoodItem {
                center_mm: [-40.0 + j1[0], j1[1]],
                shape: ItemShape::Hemisphere { radius_mm: rng.random_range(20.0..30.0) },
            },
            FoodItem {
                center_mm: [40.0 + j1[1], j1[0]],
                shape: ItemShape::Box {
                    size_mm: [rng.random_range(30.0..40.0), rng.random_range(25.0..35.0), rng.random_range(15.0..25.0)],
                    yaw_deg: rng.random_range(0.0..90.0),
                },
            },
        ],
    };
    let card = CardSpec { center_mm: [plate.semi_axes_mm[0] + 45.0, rng.random_range(-30.0..30.0)], ..CardSpec::default() };
    let target = [40.0, 0.0, 0.0];
    let half = relative_angle_deg / 2.0;
    let az = rng.random_range(60.0..120.0);
    let tilt_offset = rng.random_range(0.0..10.0);
    let cameras = vec![
        CameraSpec::orbit(target, rng.random_range(460.0..540.0), tilt_offset + half, az),
        CameraSpec::orbit(target, rng.random_range(460.0..540.0), half - tilt_offset, az + 180.0),
    ];
    SceneSpec {
        plate: Some(plate),
        items,
        card: Some(card),
        texture: TextureSpec { seed: seed.wrapping_mul(31).wrapping_add(7), ..TextureSpec::default() },
        cameras,
    }
}

/// Angle between the viewing directions of two cameras, in degrees.
pub fn viewing_angle_deg(a: &CameraSpec, b: &CameraSpec) -> f64 {
    a.forward().dot(&b.forward()).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Image-1 pixel of a world point, if in front of the camera.
pub fn project_world(cam: &CameraSpec, k: &CameraIntrinsics<f64>, p: &Point3<f64>) -> Option<Point2<f64>> {
    let q = cam.to_camera(p);
    (q.z > 0.0).then(|| Point2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_scene() -> SceneSpec {
        SceneSpec {
            plate: None,
            items: vec![],
            card: None,
            texture: TextureSpec::default(),
            cameras: vec![CameraSpec { position_mm: [0.0, 0.0, 500.0], look_at_mm: [0.0, 0.0, 0.0] }],
        }
    }

    fn hemisphere_scene() -> SceneSpec {
        SceneSpec {
            plate: Some(PlateSpec::default()),
            items: vec![FoodItem { center_mm: [0.0, 0.0], shape: ItemShape::Hemisphere { radius_mm: 30.0 } }],
            card: Some(CardSpec::default()),
            texture: TextureSpec::default(),
            cameras: vec![
                CameraSpec::orbit([40.0, 0.0, 0.0], 500.0, 10.0, 90.0),
                CameraSpec::orbit([40.0, 0.0, 0.0], 500.0, 10.0, 270.0),
            ],
        }
    }

    #[test]
    fn hemisphere_volume() {
        let s = make_scene(hemisphere_scene()).unwrap();
        let v = analytic_volume(&s.spec);
        assert!((v - 56.5487).abs() / 56.5487 < 1e-3, "{v}");
        let fine = integrate_item(&s.spec.items[0], 0.05);
        let coarse = integrate_item(&s.spec.items[0], 0.1);
        assert!((fine - coarse).abs() / fine < 5e-4);
    }

    #[test]
    fn box_and_additivity() {
        let mut spec = hemisphere_scene();
        spec.items = vec![
            FoodItem { center_mm: [-40.0, 0.0], shape: ItemShape::Box { size_mm: [50.0, 40.0, 20.0], yaw_deg: 0.0 } },
            FoodItem { center_mm: [40.0, 0.0], shape: ItemShape::Hemisphere { radius_mm: 20.0 } },
        ];
        let v = analytic_item_volumes(&spec);
        assert!((v[0] - 40.0).abs() < 0.04, "{}", v[0]);
        assert!((analytic_volume(&spec) - v[0] - v[1]).abs() < 1e-12);
        for it in &spec.items {
            let n = integrate_item(it, 0.1);
            assert!((n - it.closed_form_volume_ml()).abs() / it.closed_form_volume_ml() < 1e-3);
        }
    }

    #[test]
    fn zero_items_zero_volume() {
        let mut spec = hemisphere_scene();
        spec.items.clear();
        assert_eq!(analytic_volume(&make_scene(spec).unwrap().spec), 0.0);
    }

    #[test]
    fn steep_camera_rejected() {
        let mut spec = hemisphere_scene();
        spec.cameras[1] = CameraSpec::orbit([0.0, 0.0, 0.0], 500.0, 60.0, 0.0);
        assert!(matches!(make_scene(spec), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn flat_scene_depth_is_constant() {
        let s = make_scene(flat_scene()).unwrap();
        let k = CameraIntrinsics::new(500.0, 500.0, 99.5, 79.5, 200, 160).unwrap();
        let v = s.render(0, &k);
        assert!(v.depth.as_slice().iter().all(|&d| (d - 500.0).abs() < 1e-3));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = make_scene(hemisphere_scene()).unwrap();
        let k = CameraIntrinsics::new(400.0, 400.0, 159.5, 119.5, 320, 240).unwrap();
        let a = s.render(0, &k);
        let b = s.render(0, &k);
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        assert!(a.labels.as_slice().contains(&FIRST_ITEM_LABEL));
    }

    #[test]
    fn depths_reproject_consistently() {
        let s = make_scene(hemisphere_scene()).unwrap();
        let k = CameraIntrinsics::new(400.0, 400.0, 159.5, 119.5, 320, 240).unwrap();
        let v1 = s.render(0, &k);
        let v2 = s.render(1, &k);
        let pose = relative_pose(&s.spec.cameras[0], &s.spec.cameras[1]);
        let (mut checked, mut good) = (0, 0);
        for y in (5..235).step_by(7) {
            for x in (5..315).step_by(7) {
                let z = v1.depth.get(x, y) as f64;
                let p = Point3::new((x as f64 - k.cx) / k.fx * z, (y as f64 - k.cy) / k.fy * z, z);
                let q = pose.transform(&p);
                let (u, w) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
                let (ui, wi) = (u.round() as isize, w.round() as isize);
                let Some(z2) = v2.depth.get_checked(ui, wi) else { continue };
                // Only points visible from camera 2 (not occluded).
                let z2u = {
                    let ray = Vector3::new((u - k.cx) / k.fx, (w - k.cy) / k.fy, 1.0);
                    (q.coords - ray * z2 as f64).norm()
                };
                if z2u > 2.0 {
                    continue;
                }
                checked += 1;
                // The pixel whose depth reproduces q lies within 0.5 px.
                let ray_hit = Vector3::new((ui as f64 - k.cx) / k.fx, (wi as f64 - k.cy) / k.fy, 1.0) * z2 as f64;
                let (uu, ww) = (k.fx * ray_hit.x / ray_hit.z + k.cx, k.fy * ray_hit.y / ray_hit.z + k.cy);
                if ((uu - ui as f64).abs() <= 0.5) && (ww - wi as f64).abs() <= 0.5 && (u - ui as f64).abs() <= 0.5 {
                    good += 1;
                }
            }
        }
        assert!(checked > 500);
        assert_eq!(good, checked);
    }

    #[test]
    fn generated_scenes_are_valid() {
        for (i, kind) in [SceneKind::Hemisphere, SceneKind::Box, SceneKind::Dome, SceneKind::TwoItems].into_iter().enumerate() {
            let spec = generated_scene(kind, 20.0, i as u64);
            spec.validate().unwrap();
            let a = viewing_angle_deg(&spec.cameras[0], &spec.cameras[1]);
            assert!((a - 20.0).abs() < 1e-9, "{a}");
        }
    }

    #[test]
    fn scene_description_json_round_trip() {
        let spec = generated_scene(SceneKind::TwoItems, 18.0, 3);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SceneSpec>(&json).unwrap(), spec);
        assert!(serde_json::from_str::<SceneSpec>(r#"{"cameras": [], "bogus": 1}"#).is_err());
    }
}
