//! Synthetic dataset generation by ray casting against textured planes.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::dataset::{Dataset, StampedPose};
use super::scene::{cast, Plane, SceneConfig};
use super::HarnessError;
use crate::esikf_vis::{ImuSample, GRAVITY};
use crate::geometry::{exp_so3, Camera, Pose};
use crate::image_front::GrayImage;

const IMU_STREAM: u64 = 1;
const PIXEL_STREAM: u64 = 2;
const LIDAR_STREAM: u64 = 3;
const LIS_STREAM: u64 = 4;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Sample times `k / rate` in `[0, duration]`, rounded to whole microseconds.
pub fn time_grid(rate: f64, duration: f64) -> Vec<f64> {
    let n = (duration * rate + 1e-9).floor() as usize;
    (0..=n).map(|k| (k as f64 * 1e6 / rate).round() / 1e6).collect()
}

/// Render a camera (camera-to-world `pose`) view of the planes. `jitter`
/// holds one (du, dv) sample offset per pixel; pixels seeing nothing are black.
pub fn render(planes: &[Plane], camera: &Camera, pose: &Pose, jitter: Option<&[(f64, f64)]>) -> GrayImage {
    let (w, h) = (camera.width, camera.height);
    let k = &camera.intrinsics;
    let origin = pose.translation;
    let mut data = vec![0.0f32; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let (du, dv) = jitter.map_or((0.0, 0.0), |j| j[y * w + x]);
            let ray = Vector3::new((x as f64 + du - k.cx) / k.fx, (y as f64 + dv - k.cy) / k.fy, 1.0);
            let dir = (pose.rotation * ray).normalize();
            if let Some(hit) = cast(planes, &origin, &dir) {
                *out = planes[hit.plane].shade(hit.s, hit.t);
            }
        }
    });
    let img = GrayImage::new(w, h, data).expect("shaded intensities lie in [0, 1]");
    // Quantize now so the in-memory dataset equals what is written to disk.
    GrayImage::from_u8(w, h, &img.to_u8()).expect("same size")
}

/// Unit ray directions of one scan in the LiDAR frame (x forward, z up).
pub fn lidar_rays(cfg: &SceneConfig) -> Vec<Vector3<f64>> {
    let l = &cfg.lidar;
    let hf = l.horizontal_fov_deg.to_radians();
    let vf = l.vertical_fov_deg.to_radians();
    let step = |fov: f64, n: usize, i: usize| if n == 1 { 0.0 } else { -fov / 2.0 + fov * i as f64 / (n - 1) as f64 };
    let mut rays = Vec::with_capacity(l.horizontal_rays * l.vertical_rays);
    for j in 0..l.vertical_rays {
        let el = step(vf, l.vertical_rays, j);
        for i in 0..l.horizontal_rays {
            let az = step(hf, l.horizontal_rays, i);
            rays.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
        }
    }
    rays
}

/// Deterministic synthetic dataset for `cfg` and `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Dataset, HarnessError> {
    cfg.validate()?;
    let planes: Vec<Plane> = cfg
        .planes
        .iter()
        .map(|p| Plane::new(p, &cfg.texture))
        .collect::<Result<_, _>>()
        .map_err(HarnessError::Config)?;
    let camera = cfg.camera.camera()?;
    let lidar_to_body = cfg.lidar.lidar_to_body.pose();
    let traj = &cfg.trajectory;
    let noise = &cfg.noise;

    let mut imu_rng = rng(seed, IMU_STREAM);
    let imu_times = time_grid(cfg.rates.imu, cfg.duration);
    let dt = 1.0 / cfg.rates.imu;
    let mut ba = Vector3::from(noise.accel_bias);
    let mut bg = Vector3::from(noise.gyro_bias);
    let mut imu = Vec::with_capacity(imu_times.len());
    let mut ground_truth = Vec::with_capacity(imu_times.len());
    for &t in &imu_times {
        let k = traj.kinematics(t, cfg.duration);
        let f = k.pose.rotation.transpose() * (k.acceleration - GRAVITY);
        let an = noise.imu.accel_noise / dt.sqrt();
        let gn = noise.imu.gyro_noise / dt.sqrt();
        imu.push(ImuSample {
            t,
            accel: f + ba + gauss3(&mut imu_rng) * an,
            gyro: k.angular_velocity + bg + gauss3(&mut imu_rng) * gn,
        });
        ba += gauss3(&mut imu_rng) * (noise.imu.accel_walk * dt.sqrt());
        bg += gauss3(&mut imu_rng) * (noise.imu.gyro_walk * dt.sqrt());
        ground_truth.push(StampedPose { t, pose: k.pose });
    }

    let mut pixel_rng = rng(seed, PIXEL_STREAM);
    let mut jitter = Vec::new();
    let mut images = Vec::new();
    for t in time_grid(cfg.rates.camera, cfg.duration) {
        let body = traj.kinematics(t, cfg.duration).pose;
        let j = if noise.pixel_sigma > 0.0 {
            jitter.clear();
            jitter.extend((0..camera.width * camera.height).map(|_| {
                let du: f64 = StandardNormal.sample(&mut pixel_rng);
                let dv: f64 = StandardNormal.sample(&mut pixel_rng);
                (du * noise.pixel_sigma, dv * noise.pixel_sigma)
            }));
            Some(jitter.as_slice())
        } else {
            None
        };
        images.push((t, render(&planes, &camera, &camera.world_pose(&body), j)));
    }

    let rays = lidar_rays(cfg);
    let mut lidar_rng = rng(seed, LIDAR_STREAM);
    let mut lis_rng = rng(seed, LIS_STREAM);
    let mut scans = Vec::new();
    let mut lis_poses = Vec::new();
    for t in time_grid(cfg.rates.lidar, cfg.duration) {
        let body = traj.kinematics(t, cfg.duration).pose;
        let lidar = lidar_to_body.then(&body);
        let mut pts = Vec::new();
        for r in &rays {
            let dir = lidar.rotation * r;
            let Some(hit) = cast(&planes, &lidar.translation, &dir) else { continue };
            if hit.range > cfg.lidar.max_range {
                continue;
            }
            let n: f64 = StandardNormal.sample(&mut lidar_rng);
            pts.push(r * (hit.range + n * noise.lidar_range_sigma));
        }
        scans.push((t, pts));
        let mut lis = body;
        lis.rotation = body.rotation * exp_so3(&(gauss3(&mut lis_rng) * noise.lis_rotation_sigma));
        lis.translation += gauss3(&mut lis_rng) * noise.lis_position_sigma;
        lis_poses.push(StampedPose { t, pose: lis });
    }

    Ok(Dataset {
        camera,
        lidar_to_body,
        imu,
        images,
        scans,
        lis_poses,
        ground_truth,
    })
}
