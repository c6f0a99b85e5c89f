//! Per-frame orchestration: IMU propagation, plane-map insertion, joint
//! feature/projection tracking, the hybrid filter update and feature depth.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::dataset::{write_file, Dataset, StampedPose};
use super::eval::{write_error_curve, EvalReport, MATCH_WINDOW};
use super::HarnessError;
use crate::depth_est::{
    finalize_map_point, optimize_depth, parallax, recover_feature, step_window, triangulate, DepthConfig, DepthEstimate, FeatureTrack,
    MapPoint, SlidingWindow, StepOutcome, TrackState,
};
use crate::esikf_vis::{
    iterated_update, measurement_jacobian, project_centroids, propagate, residual_hybrid, Covariance, FilterConfig, HybridMeasurement,
    ImuSample, NavState, GRAVITY, STATE_DIM,
};
use crate::geometry::{Camera, Pixel, Pose};
use crate::image_front::{build_pyramid, harris_detect_with, lk_track_pyramid, ransac_filter, HarrisConfig, RansacConfig};
use crate::plane_map::{write_centroids, PlaneCentroid, PlaneMap, PlaneMapConfig};
use crate::util::fmt_sig;

/// Which measurement kinds enter the filter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Hybrid,
    FeaturesOnly,
    CentroidsOnly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Hybrid => "hybrid",
            Ablation::FeaturesOnly => "features-only",
            Ablation::CentroidsOnly => "centroids-only",
        }
    }

    fn features(self) -> bool {
        self != Ablation::CentroidsOnly
    }

    fn centroids(self) -> bool {
        self != Ablation::FeaturesOnly
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hybrid" => Ok(Ablation::Hybrid),
            "features-only" => Ok(Ablation::FeaturesOnly),
            "centroids-only" => Ok(Ablation::CentroidsOnly),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

/// Standard deviations of the initial state uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSigma {
    pub rotation: f64,
    pub position: f64,
    pub velocity: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for InitialSigma {
    fn default() -> Self {
        Self {
            rotation: 0.005,
            position: 0.01,
            velocity: 0.02,
            accel_bias: 0.1,
            gyro_bias: 0.005,
        }
    }
}

impl InitialSigma {
    pub fn covariance(&self) -> Covariance {
        let mut c = Covariance::zeros();
        for (block, s) in [self.rotation, self.position, self.velocity, self.accel_bias, self.gyro_bias].into_iter().enumerate() {
            for i in 0..3 {
                c[(3 * block + i, 3 * block + i)] = s * s;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ablation: Ablation,
    pub max_features: usize,
    /// Minimum pixel spacing between detected features.
    pub feature_min_distance: f64,
    pub max_centroid_terms: usize,
    /// Minimum pixel spacing between projected centroids.
    pub centroid_min_distance: f64,
    /// Points closer than this to the border are not tracked (px).
    pub track_margin: f64,
    /// Terms whose innovation at the prior exceeds this χ² value (2 dof) are
    /// left out of the update. Non-finite disables the gate.
    pub gate_chi2: f64,
    /// Largest RMS reprojection error (px) of a converging depth fit.
    pub max_depth_rms: f64,
    pub initial_sigma: InitialSigma,
    pub plane_map: PlaneMapConfig,
    pub depth: DepthConfig,
    pub filter: FilterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Hybrid,
            max_features: 150,
            feature_min_distance: 15.0,
            max_centroid_terms: 80,
            centroid_min_distance: 12.0,
            track_margin: 11.0,
            gate_chi2: 13.8,
            max_depth_rms: 1.0,
            initial_sigma: InitialSigma::default(),
            plane_map: PlaneMapConfig::default(),
            depth: DepthConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
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
        self.plane_map.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.filter.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let s = &self.initial_sigma;
        if ![s.rotation, s.position, s.velocity, s.accel_bias, s.gyro_bias].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(HarnessError::Config("initial_sigma entries must be positive".into()));
        }
        if !(self.gate_chi2 > 0.0 && self.max_depth_rms > 0.0) {
            return Err(HarnessError::Config("gate_chi2 and max_depth_rms must be positive".into()));
        }
        if !(self.track_margin >= 0.0 && self.feature_min_distance >= 0.0 && self.centroid_min_distance >= 0.0) {
            return Err(HarnessError::Config("distances must be non-negative".into()));
        }
        if self.depth.window_capacity < 2 {
            return Err(HarnessError::Config("depth.window_capacity must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub t: f64,
    /// Features that survived tracking and RANSAC.
    pub tracked_features: usize,
    pub projected_centroids: usize,
    pub feature_terms: usize,
    pub centroid_terms: usize,
    pub dropped_terms: usize,
    /// Terms rejected by the innovation gate.
    pub gated_terms: usize,
    pub ransac_outliers: usize,
    pub recovered: usize,
    pub iterations: usize,
    pub degraded: bool,
    pub map_points: usize,
    pub plane_centroids: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Body-to-world estimate per processed camera frame.
    pub trajectory: Vec<StampedPose>,
    pub map_points: Vec<MapPoint>,
    pub centroids: Vec<PlaneCentroid>,
    pub diagnostics: Vec<FrameDiagnostics>,
    /// Why the run stopped early, if it did.
    pub truncated: Option<String>,
}

struct Track {
    track: FeatureTrack,
    window: SlidingWindow,
    est: Option<DepthEstimate>,
}

/// Derivative at `ts[0]` of the quadratic through three samples.
fn lagrange_slope(ts: [f64; 3], ps: [Vector3<f64>; 3]) -> Vector3<f64> {
    let [t0, t1, t2] = ts;
    ps[0] * ((2.0 * t0 - t1 - t2) / ((t0 - t1) * (t0 - t2)))
        + ps[1] * ((t0 - t2) / ((t1 - t0) * (t1 - t2)))
        + ps[2] * ((t0 - t1) / ((t2 - t0) * (t2 - t1)))
}

/// Ground-truth pose and velocity at the first image; biases start at zero.
pub fn initial_state(data: &Dataset) -> Result<NavState, HarnessError> {
    let t0 = data.images.first().ok_or_else(|| HarnessError::MissingStream("images".into()))?.0;
    let gt = &data.ground_truth;
    let i = gt.partition_point(|p| p.t < t0);
    let j = [i.wrapping_sub(1), i]
        .into_iter()
        .filter(|&j| j < gt.len() && (gt[j].t - t0).abs() <= MATCH_WINDOW)
        .min_by(|&a, &b| (gt[a].t - t0).abs().total_cmp(&(gt[b].t - t0).abs()))
        .ok_or_else(|| HarnessError::Config("ground truth does not cover the first image".into()))?;
    if gt.len() < 3 {
        return Err(HarnessError::Config("ground truth needs at least 3 poses to initialize velocity".into()));
    }
    let idx = if j + 2 < gt.len() { [j, j + 1, j + 2] } else { [j, j - 1, j - 2] };
    let velocity = lagrange_slope(idx.map(|k| gt[k].t), idx.map(|k| gt[k].pose.translation));
    Ok(NavState::new(gt[j].pose, velocity))
}

fn lerp_imu(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let s = (t - a.t) / (b.t - a.t);
    ImuSample {
        t,
        accel: a.accel + (b.accel - a.accel) * s,
        gyro: a.gyro + (b.gyro - a.gyro) * s,
    }
}

/// IMU samples spanning `[t0, t1]`, interpolating the end points when they
/// fall between samples. `None` if the stream does not cover the interval.
pub fn imu_between(imu: &[ImuSample], t0: f64, t1: f64) -> Option<Vec<ImuSample>> {
    let (first, last) = (imu.first()?, imu.last()?);
    if !(first.t <= t0 && last.t >= t1 && t1 > t0) {
        return None;
    }
    let at = |t: f64| {
        let i = imu.partition_point(|s| s.t < t);
        if imu[i].t == t {
            imu[i]
        } else {
            lerp_imu(&imu[i - 1], &imu[i], t)
        }
    };
    let mut out = vec![at(t0)];
    out.extend(imu.iter().filter(|s| s.t > t0 && s.t < t1).copied());
    out.push(at(t1));
    Some(out)
}

fn numerical(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

/// Drop terms whose innovation `r` at the prior fails `rᵀ(HPHᵀ + R)⁻¹r < chi2`.
/// Terms behind the camera pass through for the update to count.
fn gate_terms(x: &NavState, cov: &Covariance, m: HybridMeasurement, camera: &Camera, cfg: &PipelineConfig) -> (HybridMeasurement, usize) {
    if !cfg.gate_chi2.is_finite() {
        return (m, 0);
    }
    let p = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, cov.as_slice());
    let passes = |term: (Vector3<f64>, Pixel), var: f64, feature: bool| {
        let single = if feature {
            HybridMeasurement { feature_terms: vec![term], centroid_terms: vec![] }
        } else {
            HybridMeasurement { feature_terms: vec![], centroid_terms: vec![term] }
        };
        let r = residual_hybrid(x, &single, camera).r;
        if r.is_empty() {
            return true;
        }
        let h = measurement_jacobian(x, &single, camera);
        let s = &h * &p * h.transpose() + DMatrix::identity(2, 2) * var;
        s.try_inverse().is_some_and(|si| (r.transpose() * si * &r)[0] < cfg.gate_chi2)
    };
    let before = m.len();
    let out = HybridMeasurement {
        feature_terms: m.feature_terms.into_iter().filter(|t| passes(*t, cfg.filter.sigma_feature, true)).collect(),
        centroid_terms: m.centroid_terms.into_iter().filter(|t| passes(*t, cfg.filter.sigma_centroid, false)).collect(),
    };
    let gated = before - out.len();
    (out, gated)
}

/// Greedy spacing filter over projections inside the trackable area.
fn select_centroids(cands: Vec<(PlaneCentroid, Pixel)>, camera: &Camera, cfg: &PipelineConfig) -> Vec<(PlaneCentroid, Pixel)> {
    let mut out: Vec<(PlaneCentroid, Pixel)> = Vec::new();
    for (c, px) in cands {
        if out.len() >= cfg.max_centroid_terms {
            break;
        }
        if camera.in_image(px, cfg.track_margin) && out.iter().all(|(_, q)| q.distance(px) >= cfg.centroid_min_distance) {
            out.push((c, px));
        }
    }
    out
}

/// Feed the track's newest observation at `frame` to its depth estimator.
/// Frames enter the window only past the parallax gate; a depth converges
/// only on a step that slides a full window. Returns the converged point.
fn advance_depth(tr: &mut Track, frame: u64, pose: Pose, camera: &Camera, cfg: &DepthConfig, max_rms: f64) -> Option<MapPoint> {
    if tr.track.map_point.is_some() || !tr.track.observations.contains_key(&frame) {
        return None;
    }
    let k = &camera.intrinsics;
    let Some(est) = tr.est else {
        let latest = tr.window.latest()?;
        if latest < frame && parallax(&tr.track, latest, frame).ok()? > cfg.parallax_threshold {
            tr.window.push(frame, pose).ok()?;
            if let Ok(d) = triangulate(&tr.track, &tr.window, k, cfg) {
                tr.est = optimize_depth(&tr.window, &tr.track, d, k, cfg).ok();
            }
        }
        return None;
    };
    let slides = tr.window.is_full();
    match step_window(&mut tr.window, &tr.track, &est, (frame, pose), k, cfg) {
        Ok(StepOutcome::Advanced(e)) => tr.est = Some(e),
        Ok(StepOutcome::Paused { .. }) => return None,
        Err(_) => {
            tr.est = None;
            tr.window = SlidingWindow::from_frames(cfg.window_capacity, [(frame, pose)]).ok()?;
            return None;
        }
    }
    if !slides {
        return None;
    }
    let est = tr.est?;
    let terms = tr.window.indices().iter().skip(1).filter(|i| tr.track.observations.contains_key(i)).count();
    if !((est.final_cost / terms.max(1) as f64).sqrt() <= max_rms) {
        return None;
    }
    let mp = finalize_map_point(&tr.track, &tr.window, tr.est.as_ref()?, k, cfg).ok()??;
    tr.track.converge(mp.clone());
    Some(mp)
}

struct Propagator<'a> {
    data: &'a Dataset,
    noise: crate::esikf_vis::ImuNoise,
}

impl Propagator<'_> {
    /// Propagate from image `i - 1` to image `i`; `Ok(None)` when the IMU
    /// stream ends first.
    fn step(&self, x: &NavState, cov: &Covariance, i: usize) -> Result<Option<(NavState, Covariance)>, HarnessError> {
        let (t0, t1) = (self.data.images[i - 1].0, self.data.images[i].0);
        let Some(seg) = imu_between(&self.data.imu, t0, t1) else {
            return Ok(None);
        };
        propagate(x, cov, &seg, &GRAVITY, &self.noise).map(Some).map_err(numerical)
    }
}

fn truncation(i: usize, t: f64) -> String {
    format!("IMU stream ends before image {i} (t = {t})")
}

/// IMU-only trajectory from the same initial state and frame segmentation
/// the pipeline uses.
pub fn dead_reckoning(data: &Dataset, cfg: &PipelineConfig) -> Result<Vec<StampedPose>, HarnessError> {
    data.validate()?;
    let prop = Propagator { data, noise: cfg.filter.imu };
    let mut x = initial_state(data)?;
    let mut cov = cfg.initial_sigma.covariance();
    let mut out = vec![StampedPose { t: data.images[0].0, pose: x.pose }];
    for i in 1..data.images.len() {
        match prop.step(&x, &cov, i)? {
            Some((nx, ncov)) => (x, cov) = (nx, ncov),
            None => break,
        }
        out.push(StampedPose { t: data.images[i].0, pose: x.pose });
    }
    Ok(out)
}

/// Run the full estimator over a dataset. Strictly sequential and
/// deterministic.
pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineOutput, HarnessError> {
    cfg.validate()?;
    data.validate()?;
    let camera = data.camera;
    let prop = Propagator { data, noise: cfg.filter.imu };
    let mut map = PlaneMap::new(cfg.plane_map.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let harris = HarrisConfig {
        border: cfg.track_margin.ceil() as usize,
        ..HarrisConfig::default()
    };
    let ransac = RansacConfig::default();

    let mut state = initial_state(data)?;
    let mut cov = cfg.initial_sigma.covariance();
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id = 0u64;
    let mut map_points = Vec::new();
    let mut centroids = Vec::new();
    let mut scan_idx = 0;
    let mut prev_pyr = None;
    let mut out = PipelineOutput {
        trajectory: Vec::new(),
        map_points: Vec::new(),
        centroids: Vec::new(),
        diagnostics: Vec::new(),
        truncated: None,
    };

    for (i, (t, img)) in data.images.iter().enumerate() {
        let frame = i as u64;
        let x_prev = state;
        if i > 0 {
            match prop.step(&state, &cov, i)? {
                Some((x, c)) => (state, cov) = (x, c),
                None => {
                    out.truncated = Some(truncation(i, *t));
                    break;
                }
            }
        }
        while scan_idx < data.scans.len() && data.scans[scan_idx].0 <= *t + 1e-9 {
            let to_world = data.lidar_to_body.then(&data.lis_poses[scan_idx].pose);
            let world: Vec<Vector3<f64>> = data.scans[scan_idx].1.iter().map(|p| to_world.transform_point(p)).collect();
            if !world.is_empty() {
                map.insert_scan(&world);
            }
            scan_idx += 1;
        }
        let pyr = build_pyramid(img).map_err(|e| HarnessError::Config(format!("image {i}: {e}")))?;
        let mut diag = FrameDiagnostics {
            frame,
            t: *t,
            ..FrameDiagnostics::default()
        };

        if let Some(prev) = &prev_pyr {
            centroids = map.extract_centroids();
            let projected = select_centroids(project_centroids(&x_prev, &centroids, &camera), &camera, cfg);
            let nf = tracks.len();
            let mut pts: Vec<Pixel> = tracks.iter().map(|tr| tr.track.last_observation()).collect();
            pts.extend(projected.iter().map(|(_, px)| *px));
            let results = lk_track_pyramid(prev, &pyr, &pts, None).map_err(|e| HarnessError::Config(e.to_string()))?;
            let ok: Vec<usize> = (0..pts.len())
                .filter(|&j| results[j].is_ok() && camera.in_image(results[j].point, 0.0))
                .collect();
            let a: Vec<Pixel> = ok.iter().map(|&j| pts[j]).collect();
            let b: Vec<Pixel> = ok.iter().map(|&j| results[j].point).collect();
            let rs = ransac_filter(&a, &b, &ransac).map_err(numerical)?;
            let mut good = vec![false; pts.len()];
            for (n, &j) in ok.iter().enumerate() {
                good[j] = rs.inliers[n];
            }
            diag.ransac_outliers = ok.len() - rs.inlier_count();
            diag.projected_centroids = projected.len();

            let mut lost = Vec::new();
            for (j, tr) in tracks.iter_mut().enumerate() {
                if good[j] {
                    tr.track.add_observation(frame, results[j].point);
                    diag.tracked_features += 1;
                } else {
                    lost.push(j);
                }
            }

            let mut m = HybridMeasurement::default();
            if cfg.ablation.features() {
                for tr in &tracks {
                    if let (Some(mp), Some(px)) = (&tr.track.map_point, tr.track.observations.get(&frame)) {
                        m.feature_terms.push((mp.position, *px));
                    }
                }
            }
            if cfg.ablation.centroids() {
                for (j, (c, _)) in projected.iter().enumerate() {
                    if good[nf + j] {
                        m.centroid_terms.push((c.position, results[nf + j].point));
                    }
                }
            }
            let (m, gated) = gate_terms(&state, &cov, m, &camera, cfg);
            diag.gated_terms = gated;
            let upd = iterated_update(&state, &cov, &m, &camera, &cfg.filter);
            state = upd.state;
            cov = upd.cov;
            diag.feature_terms = m.feature_terms.len();
            diag.centroid_terms = m.centroid_terms.len();
            diag.dropped_terms = upd.dropped_terms;
            diag.iterations = upd.iterations;
            diag.degraded = upd.degraded;
            if !state.is_finite() || !cov.iter().all(|v| v.is_finite()) {
                return Err(HarnessError::Numerical(format!("filter state is not finite at image {i}")));
            }

            let cam_pose = camera.world_pose(&state.pose);
            for &j in &lost {
                let tr = &mut tracks[j];
                let mut w = tr.window.clone();
                if w.latest().is_none_or(|l| l < frame) && w.push(frame, cam_pose).is_err() {
                    tr.track.state = TrackState::Dropped;
                    continue;
                }
                if recover_feature(&mut tr.track, &w, prev, &pyr, &camera.intrinsics, &cfg.depth).is_ok() {
                    diag.recovered += 1;
                }
            }
            tracks.retain(|tr| tr.track.state != TrackState::Dropped);
            for tr in tracks.iter_mut() {
                if let Some(mp) = advance_depth(tr, frame, cam_pose, &camera, &cfg.depth, cfg.max_depth_rms) {
                    map_points.push(mp);
                }
            }
        }

        let cam_pose = camera.world_pose(&state.pose);
        let existing: Vec<Pixel> = tracks.iter().map(|tr| tr.track.last_observation()).collect();
        let room = cfg.max_features.saturating_sub(tracks.len());
        for px in harris_detect_with(pyr.full(), room, cfg.feature_min_distance, &existing, &harris) {
            let window = SlidingWindow::from_frames(cfg.depth.window_capacity, [(frame, cam_pose)]).map_err(numerical)?;
            tracks.push(Track {
                track: FeatureTrack::new(next_id, frame, px),
                window,
                est: None,
            });
            next_id += 1;
        }

        diag.map_points = map_points.len();
        diag.plane_centroids = centroids.len();
        out.diagnostics.push(diag);
        out.trajectory.push(StampedPose { t: *t, pose: state.pose });
        prev_pyr = Some(pyr);
    }

    map_points.sort_by_key(|m| m.source_track);
    out.map_points = map_points;
    out.centroids = map.extract_centroids();
    Ok(out)
}

/// `# id x y z` header, then one converged map point per line.
pub fn write_map_points<W: Write>(mut w: W, points: &[MapPoint]) -> std::io::Result<()> {
    writeln!(w, "# id x y z")?;
    for p in points {
        writeln!(
            w,
            "{} {} {} {}",
            p.source_track,
            fmt_sig(p.position.x),
            fmt_sig(p.position.y),
            fmt_sig(p.position.z)
        )?;
    }
    Ok(())
}

pub const DIAGNOSTICS_HEADER: &str = "frame,t,tracked_features,projected_centroids,feature_terms,centroid_terms,dropped_terms,gated_terms,ransac_outliers,recovered,iterations,degraded,map_points,plane_centroids";

pub fn write_diagnostics<W: Write>(mut w: W, diags: &[FrameDiagnostics]) -> std::io::Result<()> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for d in diags {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            d.frame,
            fmt_sig(d.t),
            d.tracked_features,
            d.projected_centroids,
            d.feature_terms,
            d.centroid_terms,
            d.dropped_terms,
            d.gated_terms,
            d.ransac_outliers,
            d.recovered,
            d.iterations,
            d.degraded as u8,
            d.map_points,
            d.plane_centroids
        )?;
    }
    Ok(())
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const MAP_POINTS_FILE: &str = "map_points.txt";
pub const CENTROIDS_FILE: &str = "centroids.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const ERRORS_FILE: &str = "errors.csv";

/// Write trajectory, map points, centroids, diagnostics and (given a
/// report) the error curve into `dir`.
pub fn export(out: &PipelineOutput, report: Option<&EvalReport>, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_file(&dir.join(TRAJECTORY_FILE), |w| super::dataset::write_trajectory(w, &out.trajectory))?;
    write_file(&dir.join(MAP_POINTS_FILE), |w| write_map_points(w, &out.map_points))?;
    write_file(&dir.join(CENTROIDS_FILE), |w| write_centroids(w, &out.centroids))?;
    write_file(&dir.join(DIAGNOSTICS_FILE), |w| write_diagnostics(w, &out.diagnostics))?;
    if let Some(r) = report {
        write_file(&dir.join(ERRORS_FILE), |w| write_error_curve(w, r))?;
    }
    Ok(())
}
