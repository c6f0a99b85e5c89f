//! Scene description: textured rectangles, a circular body trajectory and
//! sensor settings, loadable from TOML.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::esikf_vis::ImuNoise;
use crate::geometry::{Camera, CameraIntrinsics, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Seconds.
    pub duration: f64,
    pub rates: Rates,
    pub camera: CameraConfig,
    pub lidar: LidarConfig,
    pub trajectory: CircleTrajectory,
    pub noise: NoiseConfig,
    pub texture: TextureConfig,
    pub planes: Vec<PlaneSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub imu: f64,
    pub camera: f64,
    pub lidar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extrinsic {
    /// Row-major rotation into the body frame.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_body: Extrinsic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub horizontal_fov_deg: f64,
    pub vertical_fov_deg: f64,
    pub horizontal_rays: usize,
    pub vertical_rays: usize,
    /// Meters.
    pub max_range: f64,
    pub lidar_to_body: Extrinsic,
}

/// Body moves counter-clockwise on a horizontal circle with a vertical
/// wobble, heading along the tangent plus `yaw_offset_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleTrajectory {
    pub center: [f64; 3],
    pub radius: f64,
    pub laps: f64,
    /// Amplitude of `z = a sin 2θ` (m).
    pub height_amplitude: f64,
    pub yaw_offset_deg: f64,
    /// Angle at t = 0 (deg).
    pub start_angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Std-dev of the per-pixel ray jitter used when rendering (px).
    pub pixel_sigma: f64,
    /// LiDAR range noise std-dev (m).
    pub lidar_range_sigma: f64,
    /// LIS surrogate position noise std-dev (m).
    pub lis_position_sigma: f64,
    /// LIS surrogate rotation noise std-dev (rad).
    pub lis_rotation_sigma: f64,
    pub imu: ImuNoise,
    /// Initial accelerometer bias (m/s²).
    pub accel_bias: [f64; 3],
    /// Initial gyroscope bias (rad/s).
    pub gyro_bias: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    /// Texel edge length (m).
    pub texel: f64,
    /// Blobs per square meter.
    pub blob_density: f64,
    pub min_blob_radius: f64,
    pub max_blob_radius: f64,
}

/// Bounded textured rectangle. `u_axis` defaults to a horizontal direction
/// in the plane (or world x for horizontal planes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default)]
    pub u_axis: Option<[f64; 3]>,
    /// Full size along u and v (m).
    pub extent: [f64; 2],
    pub texture_seed: u64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            imu: 200.0,
            camera: 20.0,
            lidar: 10.0,
        }
    }
}

/// Camera looking along body +x with image x to the body's right.
const FORWARD_CAMERA: [[f64; 3]; 3] = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];

impl Default for Extrinsic {
    fn default() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 384,
            fx: 320.0,
            fy: 320.0,
            cx: 255.5,
            cy: 191.5,
            cam_to_body: Extrinsic {
                rotation: FORWARD_CAMERA,
                translation: [0.05, 0.0, 0.02],
            },
        }
    }
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            horizontal_fov_deg: 90.0,
            vertical_fov_deg: 60.0,
            horizontal_rays: 64,
            vertical_rays: 32,
            max_range: 30.0,
            lidar_to_body: Extrinsic {
                translation: [0.0, 0.0, 0.1],
                ..Extrinsic::default()
            },
        }
    }
}

impl Default for CircleTrajectory {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.0],
            radius: 2.0,
            laps: 1.0,
            height_amplitude: 0.2,
            yaw_offset_deg: 0.0,
            start_angle_deg: 0.0,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            lidar_range_sigma: 0.0,
            lis_position_sigma: 0.0,
            lis_rotation_sigma: 0.0,
            imu: ImuNoise::default(),
            accel_bias: [0.05, -0.03, 0.04],
            gyro_bias: [0.002, -0.001, 0.0015],
        }
    }
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            texel: 0.01,
            blob_density: 1000.0,
            min_blob_radius: 0.01,
            max_blob_radius: 0.03,
        }
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            duration: 30.0,
            rates: Rates::default(),
            camera: CameraConfig::default(),
            lidar: LidarConfig::default(),
            trajectory: CircleTrajectory::default(),
            noise: NoiseConfig::default(),
            texture: TextureConfig::default(),
            planes: box_room([9.0, 7.0, 3.0], [0.0, 0.0, 0.1]),
        }
    }
}

/// Four walls, floor and ceiling of an axis-aligned room.
pub fn box_room(size: [f64; 3], center: [f64; 3]) -> Vec<PlaneSpec> {
    let [sx, sy, sz] = size;
    let [cx, cy, cz] = center;
    let plane = |c: [f64; 3], n: [f64; 3], u: [f64; 3], extent: [f64; 2], seed: u64| PlaneSpec {
        center: c,
        normal: n,
        u_axis: Some(u),
        extent,
        texture_seed: seed,
    };
    vec![
        plane([cx + sx / 2.0, cy, cz], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [sy, sz], 1),
        plane([cx - sx / 2.0, cy, cz], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [sy, sz], 2),
        plane([cx, cy + sy / 2.0, cz], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [sx, sz], 3),
        plane([cx, cy - sy / 2.0, cz], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [sx, sz], 4),
        plane([cx, cy, cz - sz / 2.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [sx, sy], 5),
        plane([cx, cy, cz + sz / 2.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [sx, sy], 6),
    ]
}

fn positive(name: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), HarnessError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be non-negative, got {v}")))
    }
}

impl Extrinsic {
    pub fn pose(&self) -> Pose {
        let r = self.rotation;
        Pose::new(
            Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]),
            Vector3::from(self.translation),
        )
    }

    fn validate(&self, name: &str) -> Result<(), HarnessError> {
        let p = self.pose();
        if !p.is_valid() {
            return Err(HarnessError::Config(format!("{name} rotation is not a proper rotation")));
        }
        if !p.translation.iter().all(|v| v.is_finite()) {
            return Err(HarnessError::Config(format!("{name} translation is not finite")));
        }
        Ok(())
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Result<Camera, HarnessError> {
        let intrinsics = CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
            .map_err(|e| HarnessError::Config(format!("camera: {e}")))?;
        Ok(Camera {
            intrinsics,
            width: self.width,
            height: self.height,
            cam_to_body: self.cam_to_body.pose(),
        })
    }
}

impl SceneConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: SceneConfig = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let s = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        positive("duration", self.duration)?;
        positive("rates.imu", self.rates.imu)?;
        positive("rates.camera", self.rates.camera)?;
        positive("rates.lidar", self.rates.lidar)?;
        if self.planes.is_empty() {
            return Err(HarnessError::Config("at least one plane is required".into()));
        }
        if self.camera.width < 32 || self.camera.height < 32 {
            return Err(HarnessError::Config("image must be at least 32x32".into()));
        }
        self.camera.camera()?;
        self.camera.cam_to_body.validate("camera.cam_to_body")?;
        self.lidar.lidar_to_body.validate("lidar.lidar_to_body")?;
        positive("lidar.horizontal_fov_deg", self.lidar.horizontal_fov_deg)?;
        positive("lidar.vertical_fov_deg", self.lidar.vertical_fov_deg)?;
        positive("lidar.max_range", self.lidar.max_range)?;
        if self.lidar.horizontal_rays == 0 || self.lidar.vertical_rays == 0 {
            return Err(HarnessError::Config("lidar ray counts must be positive".into()));
        }
        positive("trajectory.radius", self.trajectory.radius)?;
        positive("trajectory.laps", self.trajectory.laps)?;
        let n = &self.noise;
        for (name, v) in [
            ("noise.pixel_sigma", n.pixel_sigma),
            ("noise.lidar_range_sigma", n.lidar_range_sigma),
            ("noise.lis_position_sigma", n.lis_position_sigma),
            ("noise.lis_rotation_sigma", n.lis_rotation_sigma),
            ("noise.imu.accel_noise", n.imu.accel_noise),
            ("noise.imu.gyro_noise", n.imu.gyro_noise),
            ("noise.imu.accel_walk", n.imu.accel_walk),
            ("noise.imu.gyro_walk", n.imu.gyro_walk),
        ] {
            non_negative(name, v)?;
        }
        if !n.accel_bias.iter().chain(&n.gyro_bias).all(|v| v.is_finite()) {
            return Err(HarnessError::Config("IMU biases must be finite".into()));
        }
        positive("texture.texel", self.texture.texel)?;
        non_negative("texture.blob_density", self.texture.blob_density)?;
        positive("texture.min_blob_radius", self.texture.min_blob_radius)?;
        if !(self.texture.max_blob_radius >= self.texture.min_blob_radius) {
            return Err(HarnessError::Config("texture.max_blob_radius below min_blob_radius".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            Plane::new(p, &self.texture).map_err(|e| HarnessError::Config(format!("plane {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Kinematics of the body at one instant, world frame unless noted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Body-frame angular rate.
    pub angular_velocity: Vector3<f64>,
}

impl CircleTrajectory {
    /// Angular rate of the circle for a run of `duration` seconds.
    pub fn rate(&self, duration: f64) -> f64 {
        2.0 * PI * self.laps / duration
    }

    pub fn kinematics(&self, t: f64, duration: f64) -> Kinematics {
        let w = self.rate(duration);
        let th = self.start_angle_deg.to_radians() + w * t;
        let (r, a) = (self.radius, self.height_amplitude);
        let (s, c) = th.sin_cos();
        let (s2, c2) = (2.0 * th).sin_cos();
        let position = Vector3::from(self.center) + Vector3::new(r * c, r * s, a * s2);
        let velocity = Vector3::new(-r * w * s, r * w * c, 2.0 * a * w * c2);
        let acceleration = Vector3::new(-r * w * w * c, -r * w * w * s, -4.0 * a * w * w * s2);
        let yaw = th + PI / 2.0 + self.yaw_offset_deg.to_radians();
        let (sy, cy) = yaw.sin_cos();
        let rotation = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        Kinematics {
            pose: Pose::new(rotation, position),
            velocity,
            acceleration,
            angular_velocity: Vector3::new(0.0, 0.0, w),
        }
    }
}

/// Procedural texture: random discs and rectangles on a mid-grey ground,
/// box-filtered once.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    width: usize,
    height: usize,
    texel: f64,
    data: Vec<f32>,
}

impl Texture {
    pub fn generate(seed: u64, size: [f64; 2], cfg: &TextureConfig) -> Self {
        let texel = cfg.texel;
        let width = (size[0] / texel).ceil() as usize + 1;
        let height = (size[1] / texel).ceil() as usize + 1;
        let mut raw = vec![0.5f32; width * height];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs = (size[0] * size[1] * cfg.blob_density).round() as usize;
        for _ in 0..blobs {
            let cx = rng.random_range(0.0..size[0]) / texel;
            let cy = rng.random_range(0.0..size[1]) / texel;
            let rx = rng.random_range(cfg.min_blob_radius..=cfg.max_blob_radius) / texel;
            let ry = rng.random_range(cfg.min_blob_radius..=cfg.max_blob_radius) / texel;
            let value = rng.random_range(0.0f32..1.0);
            let disc = rng.random_bool(0.5);
            let x0 = (cx - rx).floor().max(0.0) as usize;
            let x1 = ((cx + rx).ceil() as usize).min(width - 1);
            let y0 = (cy - ry).floor().max(0.0) as usize;
            let y1 = ((cy + ry).ceil() as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                    if inside {
                        raw[y * width + x] = value;
                    }
                }
            }
        }
        let mut data = vec![0.0f32; width * height];
        for y in 0..height {
            for x in 0..width {
                let mut sum = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                        let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                        sum += raw[yy * width + xx];
                    }
                }
                data[y * width + x] = sum / 9.0;
            }
        }
        Self { width, height, texel, data }
    }

    /// Bilinear lookup at plane coordinates measured from the texture corner.
    pub fn sample(&self, s: f64, t: f64) -> f32 {
        let x = (s / self.texel).clamp(0.0, (self.width - 1) as f64);
        let y = (t / self.texel).clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let at = |xx: usize, yy: usize| self.data[yy * self.width + xx];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half_extent: [f64; 2],
    pub texture: Texture,
}

/// Ray hit: distance along the (unit) direction and the plane it struck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub plane: usize,
    pub s: f64,
    pub t: f64,
}

impl Plane {
    pub fn new(spec: &PlaneSpec, tex: &TextureConfig) -> Result<Self, String> {
        let n = Vector3::from(spec.normal);
        if !(n.norm() > 1e-9) {
            return Err("normal must be non-zero".into());
        }
        let normal = n.normalize();
        if !(spec.extent[0] > 0.0 && spec.extent[1] > 0.0) {
            return Err("extent must be positive".into());
        }
        let hint = match spec.u_axis {
            Some(u) => Vector3::from(u),
            None if normal.z.abs() < 0.9 => Vector3::z().cross(&normal),
            None => Vector3::x(),
        };
        let u = hint - normal * normal.dot(&hint);
        if !(u.norm() > 1e-9) {
            return Err("u_axis is parallel to the normal".into());
        }
        let u = u.normalize();
        let v = normal.cross(&u);
        Ok(Self {
            center: Vector3::from(spec.center),
            normal,
            u,
            v,
            half_extent: [spec.extent[0] / 2.0, spec.extent[1] / 2.0],
            texture: Texture::generate(spec.texture_seed, spec.extent, tex),
        })
    }

    /// Distance along a unit ray and in-plane coordinates, if it hits.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = self.normal.dot(&(self.center - origin)) / denom;
        if !(lambda > 1e-9) {
            return None;
        }
        let local = origin + dir * lambda - self.center;
        let s = self.u.dot(&local);
        let t = self.v.dot(&local);
        (s.abs() <= self.half_extent[0] && t.abs() <= self.half_extent[1]).then_some((lambda, s, t))
    }

    pub fn shade(&self, s: f64, t: f64) -> f32 {
        self.texture.sample(s + self.half_extent[0], t + self.half_extent[1])
    }
}

/// Nearest hit over all planes.
pub fn cast(planes: &[Plane], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in planes.iter().enumerate() {
        if let Some((range, s, t)) = p.intersect(origin, dir) {
            if best.is_none_or(|b| range < b.range) {
                best = Some(Hit { range, plane: i, s, t });
            }
        }
    }
    best
}
