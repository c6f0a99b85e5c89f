//! Feature-track depth: epipolar recovery of lost tracks, parallax-gated
//! triangulation and sliding-window depth refinement.
//!
//! Window poses are camera-to-world transforms. Depths are metric
//! z-coordinates in the camera of the window's reference (oldest) frame.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, CameraIntrinsics, Pixel, Pose};
use crate::image_front::{lk_track_pyramid_with, LkConfig, Pyramid, TrackStatus};
use crate::util::fmt_sig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("frame {0} is not in the window")]
    FrameMissing(u64),
    #[error("track has no observation in frame {0}")]
    MissingObservation(u64),
    #[error("need at least {need} observations, have {got}")]
    TooFewObservations { got: usize, need: usize },
    #[error("all relative translations are below the degeneracy threshold (pure rotation)")]
    PureRotation,
    #[error("normal matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("parallax {0} px does not exceed the gate")]
    InsufficientParallax(f64),
    #[error("point lies behind a camera")]
    Cheirality,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("no residual frame is valid")]
    NoValidResiduals,
    #[error("optical flow refinement failed ({0})")]
    TrackingFailed(&'static str),
    #[error("window frame indices must increase strictly ({last} then {next})")]
    NonIncreasingFrame { last: u64, next: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthConfig {
    /// Parallax gate `t_X` (px), strict.
    pub parallax_threshold: f64,
    /// Convergence gate `t_d` on `|d̂ - d̃|` (m), strict.
    pub convergence_threshold: f64,
    pub window_capacity: usize,
    /// Largest accepted condition number of `XᵀWX`.
    pub max_condition: f64,
    /// Relative translations below this norm count as zero (m).
    pub min_translation: f64,
    pub lm_max_iterations: usize,
    pub lm_step_tolerance: f64,
    pub lm_gradient_tolerance: f64,
    /// Largest mean absolute intensity error accepted from recovery tracking.
    pub recovery_max_residual: f64,
    /// Observations required before triangulating.
    pub min_observations: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            parallax_threshold: 10.0,
            convergence_threshold: 0.1,
            window_capacity: 10,
            max_condition: 1e8,
            min_translation: 1e-6,
            lm_max_iterations: 50,
            lm_step_tolerance: 1e-6,
            lm_gradient_tolerance: 1e-9,
            recovery_max_residual: 0.1,
            min_observations: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Tracking,
    Recovering,
    DepthConverged,
    Dropped,
}

impl TrackState {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackState::Tracking => "tracking",
            TrackState::Recovering => "recovering",
            TrackState::DepthConverged => "depth_converged",
            TrackState::Dropped => "dropped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub source_track: u64,
    pub source_frame: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    pub observations: BTreeMap<u64, Pixel>,
    pub state: TrackState,
    pub map_point: Option<MapPoint>,
}

impl FeatureTrack {
    pub fn new(id: u64, frame: u64, px: Pixel) -> Self {
        let mut observations = BTreeMap::new();
        observations.insert(frame, px);
        Self {
            id,
            observations,
            state: TrackState::Tracking,
            map_point: None,
        }
    }

    pub fn first_frame(&self) -> u64 {
        *self.observations.keys().next().expect("track without observations")
    }

    pub fn last_frame(&self) -> u64 {
        *self.observations.keys().next_back().expect("track without observations")
    }

    pub fn last_observation(&self) -> Pixel {
        *self.observations.values().next_back().expect("track without observations")
    }

    pub fn observation(&self, frame: u64) -> Result<Pixel, DepthError> {
        self.observations
            .get(&frame)
            .copied()
            .ok_or(DepthError::MissingObservation(frame))
    }

    pub fn add_observation(&mut self, frame: u64, px: Pixel) {
        self.observations.insert(frame, px);
    }

    /// Mark converged with the given map point.
    pub fn converge(&mut self, point: MapPoint) {
        self.map_point = Some(point);
        self.state = TrackState::DepthConverged;
    }
}

/// Ordered `(frame index, camera-to-world pose)` list of bounded length.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindow {
    capacity: usize,
    frames: VecDeque<(u64, Pose)>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(2),
            frames: VecDeque::new(),
        }
    }

    pub fn from_frames(capacity: usize, frames: impl IntoIterator<Item = (u64, Pose)>) -> Result<Self, DepthError> {
        let mut w = Self::new(capacity);
        for (i, p) in frames {
            w.push(i, p)?;
        }
        Ok(w)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() >= self.capacity
    }

    pub fn frames(&self) -> impl Iterator<Item = &(u64, Pose)> {
        self.frames.iter()
    }

    pub fn indices(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.0).collect()
    }

    /// Oldest frame, the depth reference.
    pub fn reference(&self) -> Option<u64> {
        self.frames.front().map(|f| f.0)
    }

    pub fn latest(&self) -> Option<u64> {
        self.frames.back().map(|f| f.0)
    }

    pub fn pose(&self, frame: u64) -> Result<&Pose, DepthError> {
        self.frames
            .iter()
            .find(|f| f.0 == frame)
            .map(|f| &f.1)
            .ok_or(DepthError::FrameMissing(frame))
    }

    /// Append a frame, evicting the oldest when full. Returns the evicted frame.
    pub fn push(&mut self, frame: u64, pose: Pose) -> Result<Option<(u64, Pose)>, DepthError> {
        if let Some(last) = self.latest() {
            if frame <= last {
                return Err(DepthError::NonIncreasingFrame { last, next: frame });
            }
        }
        let evicted = if self.is_full() { self.frames.pop_front() } else { None };
        self.frames.push_back((frame, pose));
        Ok(evicted)
    }

    pub fn pop_front(&mut self) -> Option<(u64, Pose)> {
        self.frames.pop_front()
    }
}

/// `T_n^i`: maps camera-`n` coordinates into camera-`i` coordinates.
pub fn relative_pose(window: &SlidingWindow, i: u64, n: u64) -> Result<Pose, DepthError> {
    let ti = window.pose(i)?;
    let tn = window.pose(n)?;
    Ok(tn.then(&ti.inverse()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarSystem {
    /// Frames contributing the rows, oldest first.
    pub frames: Vec<u64>,
    pub a: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Errors of the rows before the last against the last constraining frame.
    pub e: DVector<f64>,
    pub w: DVector<f64>,
    /// Fewer than two rows: the two-unknown system is underdetermined.
    pub underdetermined: bool,
}

impl EpipolarSystem {
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.w)
    }
}

/// One epipolar row `(K⁻¹ f̄_i)ᵀ [t]x R K⁻¹` with `(R, t) = T_n^i`.
fn epipolar_row(k: &CameraIntrinsics, f_i: Pixel, rel: &Pose) -> nalgebra::RowVector3<f64> {
    let xi = k.normalized(f_i);
    xi.transpose() * skew(&rel.translation) * rel.rotation * k.inverse_matrix()
}

fn constraining_frames(track: &FeatureTrack, window: &SlidingWindow) -> Result<(Vec<u64>, u64), DepthError> {
    let n = window.latest().ok_or(DepthError::TooFewObservations { got: 0, need: 1 })?;
    let frames: Vec<u64> = window
        .indices()
        .into_iter()
        .filter(|&i| i != n && track.observations.contains_key(&i))
        .collect();
    if frames.is_empty() {
        return Err(DepthError::TooFewObservations { got: 0, need: 1 });
    }
    Ok((frames, n))
}

/// Errors `e_i` of frames `1..n-2` against frame `n-1` and the weights
/// `w_i = e_i / e_min + 1`, with `w_{n-1} = 1`.
pub fn reprojection_weights(
    track: &FeatureTrack,
    window: &SlidingWindow,
    k: &CameraIntrinsics,
) -> Result<(DVector<f64>, DVector<f64>), DepthError> {
    let (frames, _) = constraining_frames(track, window)?;
    let last = *frames.last().unwrap();
    let f_last = track.observation(last)?;
    let mut e = Vec::with_capacity(frames.len() - 1);
    for &i in &frames[..frames.len() - 1] {
        let rel = relative_pose(window, i, last)?;
        let row = epipolar_row(k, track.observation(i)?, &rel);
        e.push((row * f_last.homogeneous())[0].abs());
    }
    let w = weights_from_errors(&e);
    Ok((DVector::from_vec(e), DVector::from_vec(w)))
}

/// `w_i = e_i / max(e_min, 1e-12) + 1` followed by a final weight of 1.
pub fn weights_from_errors(e: &[f64]) -> Vec<f64> {
    let e_min = e.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-12);
    let mut w: Vec<f64> = e.iter().map(|ei| ei / e_min + 1.0).collect();
    w.push(1.0);
    w
}

/// Epipolar system constraining the track's pixel in the window's latest
/// frame from its observations in the earlier window frames.
pub fn build_epipolar_system(
    track: &FeatureTrack,
    window: &SlidingWindow,
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<EpipolarSystem, DepthError> {
    let (frames, n) = constraining_frames(track, window)?;
    let mut a = DMatrix::zeros(frames.len(), 3);
    let mut max_t: f64 = 0.0;
    for (r, &i) in frames.iter().enumerate() {
        let rel = relative_pose(window, i, n)?;
        max_t = max_t.max(rel.translation.norm());
        a.row_mut(r).copy_from(&epipolar_row(k, track.observation(i)?, &rel));
    }
    if max_t < cfg.min_translation {
        return Err(DepthError::PureRotation);
    }
    let x = a.columns(0, 2).into_owned();
    let y = -a.column(2).into_owned();
    let (e, w) = reprojection_weights(track, window, k)?;
    Ok(EpipolarSystem {
        underdetermined: frames.len() < 2,
        frames,
        a,
        x,
        y,
        e,
        w,
    })
}

/// `f̃ = (XᵀWX)⁻¹ XᵀWy`.
pub fn solve_weighted(sys: &EpipolarSystem, cfg: &DepthConfig) -> Result<Pixel, DepthError> {
    let mut m = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for r in 0..sys.x.nrows() {
        let xr = Vector2::new(sys.x[(r, 0)], sys.x[(r, 1)]);
        m += sys.w[r] * xr * xr.transpose();
        b += sys.w[r] * sys.y[r] * xr;
    }
    let eig = m.symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= cfg.max_condition) {
        return Err(DepthError::IllConditioned(cond));
    }
    let f = m.try_inverse().ok_or(DepthError::IllConditioned(cond))? * b;
    Ok(Pixel::new(f.x, f.y))
}

/// Recover a track lost in the window's latest frame.
///
/// `pyr_prev` is the image of the track's last observation, `pyr_next` the
/// image of the latest window frame. On success the recovered pixel is
/// appended and the track returns to tracking; on failure it is dropped.
pub fn recover_feature(
    track: &mut FeatureTrack,
    window: &SlidingWindow,
    pyr_prev: &Pyramid,
    pyr_next: &Pyramid,
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<Pixel, DepthError> {
    let result = recover_pixel(track, window, pyr_prev, pyr_next, k, cfg);
    match result {
        Ok(px) => {
            track.add_observation(window.latest().unwrap(), px);
            track.state = TrackState::Tracking;
        }
        Err(_) => track.state = TrackState::Dropped,
    }
    result
}

fn recover_pixel(
    track: &FeatureTrack,
    window: &SlidingWindow,
    pyr_prev: &Pyramid,
    pyr_next: &Pyramid,
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<Pixel, DepthError> {
    let n = window.latest().ok_or(DepthError::TooFewObservations { got: 0, need: 2 })?;
    let prior = window
        .indices()
        .into_iter()
        .filter(|&i| i != n && track.observations.contains_key(&i))
        .count();
    if prior < 2 {
        return Err(DepthError::TooFewObservations { got: prior, need: 2 });
    }
    let sys = build_epipolar_system(track, window, k, cfg)?;
    let coarse = solve_weighted(&sys, cfg)?;
    let from = track
        .observations
        .range(..n)
        .next_back()
        .map(|(_, p)| *p)
        .ok_or(DepthError::MissingObservation(n))?;
    let res = lk_track_pyramid_with(pyr_prev, pyr_next, &[from], Some(&[coarse]), &LkConfig::default())
        .map_err(|_| DepthError::TrackingFailed("pyramid geometry mismatch"))?[0];
    if res.status != TrackStatus::Ok {
        return Err(DepthError::TrackingFailed(res.status.as_str()));
    }
    if !(res.residual < cfg.recovery_max_residual) {
        return Err(DepthError::TrackingFailed("residual above threshold"));
    }
    Ok(res.point)
}

/// `‖f_i − f_j‖`.
pub fn parallax(track: &FeatureTrack, i: u64, j: u64) -> Result<f64, DepthError> {
    Ok(track.observation(i)?.distance(track.observation(j)?))
}

/// Linear two-view triangulation of normalized bearings `x_a`, `x_b` seen
/// from world-to-camera transforms `a`, `b`. Returns the world point.
pub fn triangulate_dlt(a: &Pose, xa: &Vector3<f64>, b: &Pose, xb: &Vector3<f64>) -> Option<Vector3<f64>> {
    let row = |p: &Pose, r: usize| nalgebra::RowVector4::new(p.rotation[(r, 0)], p.rotation[(r, 1)], p.rotation[(r, 2)], p.translation[r]);
    let mut m = Matrix4::zeros();
    m.set_row(0, &(xa.x * row(a, 2) - row(a, 0)));
    m.set_row(1, &(xa.y * row(a, 2) - row(a, 1)));
    m.set_row(2, &(xb.x * row(b, 2) - row(b, 0)));
    m.set_row(3, &(xb.y * row(b, 2) - row(b, 1)));
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = v_t.row(imin);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let p = Vector3::new(h[0], h[1], h[2]) / h[3];
    p.iter().all(|v| v.is_finite()).then_some(p)
}

/// Initial depth of the track in the window's reference frame, triangulated
/// between the reference and latest window frames once their parallax
/// exceeds `t_X`.
pub fn triangulate(
    track: &FeatureTrack,
    window: &SlidingWindow,
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<f64, DepthError> {
    let s = window.reference().ok_or(DepthError::FrameMissing(0))?;
    let m = window.latest().ok_or(DepthError::FrameMissing(0))?;
    let observed = window
        .indices()
        .into_iter()
        .filter(|i| track.observations.contains_key(i))
        .count();
    if observed < cfg.min_observations {
        return Err(DepthError::TooFewObservations {
            got: observed,
            need: cfg.min_observations,
        });
    }
    let px = parallax(track, s, m)?;
    if !(px > cfg.parallax_threshold) {
        return Err(DepthError::InsufficientParallax(px));
    }
    let ts = window.pose(s)?.inverse();
    let tm = window.pose(m)?.inverse();
    let xs = k.normalized(track.observation(s)?);
    let xm = k.normalized(track.observation(m)?);
    let p = triangulate_dlt(&ts, &xs, &tm, &xm).ok_or(DepthError::Cheirality)?;
    let ds = ts.transform_point(&p).z;
    let dm = tm.transform_point(&p).z;
    if !(ds > 0.0 && dm > 0.0) {
        return Err(DepthError::Cheirality);
    }
    Ok(ds)
}

/// Depth of the track's `from` observation at depth `d`, re-expressed as the
/// z-coordinate in camera `to`.
pub fn transfer_depth(
    d: f64,
    track: &FeatureTrack,
    from: u64,
    to: u64,
    window: &SlidingWindow,
    k: &CameraIntrinsics,
) -> Result<f64, DepthError> {
    if !(d > 0.0) {
        return Err(DepthError::NonPositiveDepth(d));
    }
    let p = k.normalized(track.observation(from)?) * d;
    let z = relative_pose(window, to, from)?.transform_point(&p).z;
    if !(z > 0.0) {
        return Err(DepthError::Cheirality);
    }
    Ok(z)
}

/// Reprojection of the reference observation at depth `d` into frame `i`,
/// minus the observation there.
pub fn depth_residual(
    d: f64,
    track: &FeatureTrack,
    s: u64,
    i: u64,
    window: &SlidingWindow,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, DepthError> {
    if !(d > 0.0) {
        return Err(DepthError::NonPositiveDepth(d));
    }
    let p = relative_pose(window, i, s)?.transform_point(&(k.normalized(track.observation(s)?) * d));
    if !(p.z > 0.0) {
        return Err(DepthError::Cheirality);
    }
    Ok(k.project_unchecked(&p).to_vector() - track.observation(i)?.to_vector())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthEstimate {
    pub reference_frame: u64,
    pub d_tilde: f64,
    pub d_hat: f64,
    /// `|d̂ − d̃|`.
    pub delta: f64,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

struct DepthTerm {
    /// Bearing of the reference observation rotated into frame i.
    a: Vector3<f64>,
    t: Vector3<f64>,
    obs: Vector2<f64>,
}

impl DepthTerm {
    fn eval(&self, d: f64, k: &CameraIntrinsics) -> Option<(Vector2<f64>, Vector2<f64>)> {
        let p = self.a * d + self.t;
        if !(p.z > 0.0) {
            return None;
        }
        let r = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy) - self.obs;
        let z2 = p.z * p.z;
        let j = Vector2::new(
            k.fx * (self.a.x * p.z - p.x * self.a.z) / z2,
            k.fy * (self.a.y * p.z - p.y * self.a.z) / z2,
        );
        Some((r, j))
    }
}

fn depth_terms(track: &FeatureTrack, window: &SlidingWindow, k: &CameraIntrinsics) -> Result<(u64, Vec<DepthTerm>), DepthError> {
    let s = window.reference().ok_or(DepthError::FrameMissing(0))?;
    let xs = k.normalized(track.observation(s)?);
    let mut terms = Vec::new();
    for i in window.indices().into_iter().skip(1) {
        let Some(obs) = track.observations.get(&i) else {
            continue;
        };
        let rel = relative_pose(window, i, s)?;
        terms.push(DepthTerm {
            a: rel.rotation * xs,
            t: rel.translation,
            obs: obs.to_vector(),
        });
    }
    Ok((s, terms))
}

/// Sum of squared residuals, `None` if any term is behind its camera.
fn depth_cost(terms: &[DepthTerm], d: f64, k: &CameraIntrinsics) -> Option<(f64, f64, f64)> {
    let (mut cost, mut g, mut h) = (0.0, 0.0, 0.0);
    for t in terms {
        let (r, j) = t.eval(d, k)?;
        cost += r.norm_squared();
        g += j.dot(&r);
        h += j.norm_squared();
    }
    Some((cost, g, h))
}

/// Levenberg–Marquardt refinement of the reference-frame depth over all
/// later window frames observing the track.
pub fn optimize_depth(
    window: &SlidingWindow,
    track: &FeatureTrack,
    d0: f64,
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<DepthEstimate, DepthError> {
    if !(d0 > 0.0) {
        return Err(DepthError::NonPositiveDepth(d0));
    }
    let (s, terms) = depth_terms(track, window, k)?;
    if terms.len() < 2 {
        return Err(DepthError::TooFewObservations {
            got: terms.len(),
            need: 2,
        });
    }
    let (mut cost, mut g, mut h) = depth_cost(&terms, d0, k).ok_or(DepthError::NoValidResiduals)?;
    let initial_cost = cost;
    let mut d = d0;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < cfg.lm_max_iterations {
        if g.abs() < cfg.lm_gradient_tolerance {
            break;
        }
        iterations += 1;
        let step = -g / (h * (1.0 + lambda) + 1e-300);
        let trial = d + step;
        match (trial > 0.0).then(|| depth_cost(&terms, trial, k)).flatten() {
            Some((c, g2, h2)) if c <= cost => {
                d = trial;
                cost = c;
                g = g2;
                h = h2;
                lambda = (lambda * 0.1).max(1e-12);
                if step.abs() < cfg.lm_step_tolerance {
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if step.abs() < cfg.lm_step_tolerance || lambda > 1e12 {
                    break;
                }
            }
        }
    }
    Ok(DepthEstimate {
        reference_frame: s,
        d_tilde: d0,
        d_hat: d,
        delta: (d - d0).abs(),
        iterations,
        initial_cost,
        final_cost: cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// The new frame entered the window and the depth was re-optimized.
    Advanced(DepthEstimate),
    /// Parallax to the latest window frame did not exceed the gate.
    Paused { parallax: f64 },
}

/// Offer a new frame to a track's window.
///
/// When its parallax to the latest window frame exceeds `t_X` the frame is
/// appended. A full window first transfers `d̂` to the second frame and drops
/// the reference. The depth is then re-optimized from the carried value,
/// which becomes `d̃`.
pub fn step_window(
    window: &mut SlidingWindow,
    track: &FeatureTrack,
    est: &DepthEstimate,
    new_frame: (u64, Pose),
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<StepOutcome, DepthError> {
    let latest = window.latest().ok_or(DepthError::FrameMissing(0))?;
    let px = parallax(track, latest, new_frame.0)?;
    if !(px > cfg.parallax_threshold) {
        return Ok(StepOutcome::Paused { parallax: px });
    }
    let mut next = window.clone();
    let mut d = est.d_hat;
    if next.is_full() {
        let frames = next.indices();
        d = transfer_depth(est.d_hat, track, frames[0], frames[1], &next, k)?;
        next.pop_front();
    }
    next.push(new_frame.0, new_frame.1)?;
    let new_est = optimize_depth(&next, track, d, k, cfg)?;
    *window = next;
    Ok(StepOutcome::Advanced(new_est))
}

/// World point of the converged track, or `None` while `δd >= t_d`.
pub fn finalize_map_point(
    track: &FeatureTrack,
    window: &SlidingWindow,
    est: &DepthEstimate,
    k: &CameraIntrinsics,
    cfg: &DepthConfig,
) -> Result<Option<MapPoint>, DepthError> {
    if !(est.delta < cfg.convergence_threshold) {
        return Ok(None);
    }
    let u = est.reference_frame;
    let p_cam = k.normalized(track.observation(u)?) * est.d_hat;
    Ok(Some(MapPoint {
        position: window.pose(u)?.transform_point(&p_cam),
        source_track: track.id,
        source_frame: u,
    }))
}

/// `track_id frame u v state`, one line per observation, tracks in id order.
pub fn write_tracks<'a, W: Write>(mut w: W, tracks: impl IntoIterator<Item = &'a FeatureTrack>) -> io::Result<()> {
    let mut sorted: Vec<&FeatureTrack> = tracks.into_iter().collect();
    sorted.sort_by_key(|t| t.id);
    for t in sorted {
        for (frame, px) in &t.observations {
            writeln!(w, "{} {} {} {} {}", t.id, frame, fmt_sig(px.u), fmt_sig(px.v), t.state.as_str())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_zyx};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn cam_pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
        Pose::new(rotation_zyx(yaw, 0.0, 0.0), Vector3::new(x, y, z))
    }

    /// Window of camera poses and an exactly observed track of `point`.
    fn scene(poses: &[Pose], point: &Vector3<f64>) -> (SlidingWindow, FeatureTrack) {
        let mut w = SlidingWindow::new(poses.len().max(2));
        let mut t = FeatureTrack::new(7, 0, Pixel::default());
        t.observations.clear();
        for (i, p) in poses.iter().enumerate() {
            w.push(i as u64, *p).unwrap();
            let pc = p.inverse().transform_point(point);
            t.add_observation(i as u64, project(&k(), &pc).unwrap());
        }
        (w, t)
    }

    fn lateral_poses(n: usize, step: f64) -> Vec<Pose> {
        (0..n).map(|i| cam_pose(step * i as f64, 0.02 * i as f64, 0.0, 0.01 * i as f64)).collect()
    }

    #[test]
    fn relative_pose_identity_and_chain() {
        let poses = lateral_poses(4, 0.3);
        let (w, _) = scene(&poses, &Vector3::new(0.0, 0.0, 8.0));
        let id = relative_pose(&w, 2, 2).unwrap();
        assert!((id.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        // rel(1,2) maps 2 -> 1, rel(2,3) maps 3 -> 2, so 3 -> 1 is rel(2,3) then rel(1,2).
        let chained = relative_pose(&w, 2, 3).unwrap().then(&relative_pose(&w, 1, 2).unwrap());
        let direct = relative_pose(&w, 1, 3).unwrap();
        assert!((chained.rotation - direct.rotation).norm() < 1e-9);
        assert!((chained.translation - direct.translation).norm() < 1e-9);
        assert!(matches!(relative_pose(&w, 9, 1), Err(DepthError::FrameMissing(9))));
    }

    #[test]
    fn relative_pose_matches_world_transform() {
        let poses = lateral_poses(3, 0.5);
        let (w, _) = scene(&poses, &Vector3::new(0.0, 0.0, 8.0));
        let p = Vector3::new(0.3, -0.2, 5.0);
        let rel = relative_pose(&w, 0, 2).unwrap();
        let oracle = poses[0].inverse().transform_point(&poses[2].transform_point(&p));
        assert!((rel.transform_point(&p) - oracle).norm() < 1e-9);
    }

    #[test]
    fn epipolar_rows_annihilate_true_pixel() {
        let poses = lateral_poses(6, 0.2);
        let (w, t) = scene(&poses, &Vector3::new(0.7, -0.4, 9.0));
        let sys = build_epipolar_system(&t, &w, &k(), &DepthConfig::default()).unwrap();
        assert_eq!(sys.a.nrows(), 5);
        let f = t.observation(5).unwrap().homogeneous();
        for r in 0..5 {
            assert!((sys.a.row(r) * f)[0].abs() < 1e-9);
        }
        assert_eq!(sys.x, sys.a.columns(0, 2).into_owned());
        assert_eq!(sys.y, -sys.a.column(2).into_owned());
        assert_eq!(sys.w[sys.w.len() - 1], 1.0);
        assert!(sys.w.iter().all(|&wi| wi >= 1.0));
    }

    #[test]
    fn two_frame_window_is_underdetermined() {
        let poses = lateral_poses(2, 0.2);
        let (w, t) = scene(&poses, &Vector3::new(0.0, 0.0, 5.0));
        let sys = build_epipolar_system(&t, &w, &k(), &DepthConfig::default()).unwrap();
        assert_eq!((sys.x.nrows(), sys.x.ncols()), (1, 2));
        assert!(sys.underdetermined);
    }

    #[test]
    fn pure_rotation_is_rejected() {
        let poses: Vec<_> = (0..4).map(|i| cam_pose(0.0, 0.0, 0.0, 0.05 * i as f64)).collect();
        let (w, t) = scene(&poses, &Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(
            build_epipolar_system(&t, &w, &k(), &DepthConfig::default()),
            Err(DepthError::PureRotation)
        );
    }

    #[test]
    fn weights_from_hand_arithmetic() {
        assert_eq!(weights_from_errors(&[0.2, 0.1]), vec![3.0, 2.0, 1.0]);
        assert_eq!(weights_from_errors(&[0.4, 0.4, 0.4]), vec![2.0, 2.0, 2.0, 1.0]);
        assert_eq!(weights_from_errors(&[]), vec![1.0]);
        // Exact tracking: errors clamp at 1e-12 instead of dividing by zero.
        let w = weights_from_errors(&[0.0, 0.0]);
        assert_eq!(w, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn weighted_solve_recovers_true_pixel() {
        // Collinear camera centers share one epipolar plane, so the path bends.
        let poses: Vec<_> = (0..5)
            .map(|i| cam_pose(0.25 * i as f64, 0.08 * (i * i) as f64, 0.0, 0.01 * i as f64))
            .collect();
        let point = Vector3::new(0.5, 0.3, 7.0);
        let (w, t) = scene(&poses, &point);
        let sys = build_epipolar_system(&t, &w, &k(), &DepthConfig::default()).unwrap();
        let f = solve_weighted(&sys, &DepthConfig::default()).unwrap();
        assert!(f.distance(t.observation(4).unwrap()) < 0.5);
    }

    #[test]
    fn identity_weights_equal_ordinary_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = 6;
        let x = DMatrix::from_fn(rows, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(rows, 3, |r, c| if c < 2 { x[(r, c)] } else { -y[r] });
        let sys = EpipolarSystem {
            frames: (0..rows as u64).collect(),
            a,
            x: x.clone(),
            y: y.clone(),
            e: DVector::zeros(rows - 1),
            w: DVector::from_element(rows, 1.0),
            underdetermined: false,
        };
        let f = solve_weighted(&sys, &DepthConfig::default()).unwrap();
        let oracle = x.clone().svd(true, true).solve(&y, 1e-15).unwrap();
        assert!((f.u - oracle[0]).abs() < 1e-10 && (f.v - oracle[1]).abs() < 1e-10);
        // Weighted normal equations hold.
        let r = &x * Vector2::new(f.u, f.v) - &y;
        assert!((x.transpose() * r).norm() < 1e-8);
    }

    #[test]
    fn motion_along_ray_is_ill_conditioned() {
        let point = Vector3::new(0.0, 0.0, 20.0);
        let poses: Vec<_> = (0..5).map(|i| cam_pose(0.0, 0.0, 0.5 * i as f64, 0.0)).collect();
        let (w, t) = scene(&poses, &point);
        let sys = build_epipolar_system(&t, &w, &k(), &DepthConfig::default()).unwrap();
        assert!(matches!(
            solve_weighted(&sys, &DepthConfig::default()),
            Err(DepthError::IllConditioned(_))
        ));
    }

    #[test]
    fn parallax_examples() {
        let mut t = FeatureTrack::new(1, 0, Pixel::new(0.0, 0.0));
        t.add_observation(1, Pixel::new(3.0, 4.0));
        t.add_observation(2, Pixel::new(3.0, 4.0));
        assert_eq!(parallax(&t, 0, 1).unwrap(), 5.0);
        assert_eq!(parallax(&t, 1, 2).unwrap(), 0.0);
        assert!(parallax(&t, 0, 5).is_err());
    }

    #[test]
    fn triangulation_noise_free_depth() {
        // Point at 10 m; 0.3 m of lateral baseline gives 15 px parallax.
        let point = Vector3::new(0.2, 0.1, 10.0);
        let poses: Vec<_> = (0..3).map(|i| cam_pose(0.15 * i as f64, 0.0, 0.0, 0.0)).collect();
        let (w, t) = scene(&poses, &point);
        assert!((parallax(&t, 0, 2).unwrap() - 15.0).abs() < 1e-9);
        let d = triangulate(&t, &w, &k(), &DepthConfig::default()).unwrap();
        assert!((d - 10.0).abs() < 1e-6);
    }

    #[test]
    fn triangulation_gate_is_strict() {
        let point = Vector3::new(0.0, 0.0, 10.0);
        let poses: Vec<_> = (0..3).map(|i| cam_pose(0.15 * i as f64, 0.0, 0.0, 0.0)).collect();
        let (w, mut t) = scene(&poses, &point);
        let cfg = DepthConfig::default();
        let f0 = t.observation(0).unwrap();
        for (dx, ok) in [(9.9, false), (10.0, false), (10.5, true)] {
            t.add_observation(2, Pixel::new(f0.u - dx, f0.v));
            let r = triangulate(&t, &w, &k(), &cfg);
            assert_eq!(!matches!(r, Err(DepthError::InsufficientParallax(_))), ok, "{dx}: {r:?}");
        }
    }

    #[test]
    fn triangulation_behind_camera_fails() {
        let poses: Vec<_> = (0..3).map(|i| cam_pose(0.3 * i as f64, 0.0, 0.0, 0.0)).collect();
        let (w, mut t) = scene(&poses, &Vector3::new(0.0, 0.0, 10.0));
        // Swap the sign of the disparity: rays only meet behind the cameras.
        let f0 = t.observation(0).unwrap();
        let f2 = t.observation(2).unwrap();
        t.add_observation(0, f2);
        t.add_observation(2, f0);
        assert_eq!(triangulate(&t, &w, &k(), &DepthConfig::default()), Err(DepthError::Cheirality));
    }

    #[test]
    fn transfer_examples() {
        let point = Vector3::new(0.0, 0.0, 10.0);
        let poses = vec![cam_pose(0.0, 0.0, 0.0, 0.0), cam_pose(0.0, 0.0, 2.0, 0.0)];
        let (w, t) = scene(&poses, &point);
        assert_eq!(transfer_depth(10.0, &t, 0, 0, &w, &k()).unwrap(), 10.0);
        assert!((transfer_depth(10.0, &t, 0, 1, &w, &k()).unwrap() - 8.0).abs() < 1e-12);
        assert!(transfer_depth(-1.0, &t, 0, 1, &w, &k()).is_err());
    }

    #[test]
    fn transfer_matches_full_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let poses = vec![
                cam_pose(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, rng.random_range(-0.2..0.2)),
                cam_pose(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5, rng.random_range(-0.2..0.2)),
            ];
            let point = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 12.0);
            let (w, t) = scene(&poses, &point);
            let d0 = poses[0].inverse().transform_point(&point).z;
            let oracle = poses[1].inverse().transform_point(&point).z;
            assert!((transfer_depth(d0, &t, 0, 1, &w, &k()).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_examples() {
        let point = Vector3::new(0.0, 0.0, 10.0);
        let poses = vec![cam_pose(0.0, 0.0, 0.0, 0.0), cam_pose(0.2, 0.0, 0.0, 0.0)];
        let (w, t) = scene(&poses, &point);
        assert!(depth_residual(10.0, &t, 0, 1, &w, &k()).unwrap().norm() < 1e-9);
        assert_eq!(depth_residual(11.0, &t, 0, 0, &w, &k()).unwrap(), Vector2::zeros());
        // Two-view closed form: u = fx (x - b) / z; the observation sits at
        // -fx b / d_true, the prediction at -fx b / d.
        let r = depth_residual(11.0, &t, 0, 1, &w, &k()).unwrap();
        let oracle = -500.0 * 0.2 / 11.0 + 500.0 * 0.2 / 10.0;
        assert!((r.x - oracle).abs() < 1e-9 && r.y.abs() < 1e-12);
    }

    fn six_frame() -> (SlidingWindow, FeatureTrack, f64) {
        let point = Vector3::new(0.4, -0.3, 10.0);
        let poses: Vec<_> = (0..6).map(|i| cam_pose(0.12 * i as f64, 0.03 * i as f64, 0.05 * i as f64, 0.005 * i as f64)).collect();
        let (w, t) = scene(&poses, &point);
        (w, t, poses[0].inverse().transform_point(&point).z)
    }

    #[test]
    fn lm_converges_from_offset() {
        let (w, t, d) = six_frame();
        let est = optimize_depth(&w, &t, 1.3 * d, &k(), &DepthConfig::default()).unwrap();
        assert!((est.d_hat - d).abs() < 1e-4, "{est:?}");
        assert!(est.final_cost <= est.initial_cost);
        assert_eq!(est.reference_frame, 0);
    }

    #[test]
    fn lm_at_optimum_is_unchanged() {
        let (w, t, d) = six_frame();
        let est = optimize_depth(&w, &t, d, &k(), &DepthConfig::default()).unwrap();
        assert_eq!(est.iterations, 0);
        assert!((est.final_cost - est.initial_cost).abs() < 1e-18);
        assert!(est.delta < 1e-12);
    }

    #[test]
    fn lm_needs_two_residual_frames() {
        let poses = lateral_poses(2, 0.3);
        let (w, t) = scene(&poses, &Vector3::new(0.0, 0.0, 5.0));
        assert!(matches!(
            optimize_depth(&w, &t, 5.0, &k(), &DepthConfig::default()),
            Err(DepthError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn lm_noisy_monte_carlo_median() {
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut errs = Vec::new();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 10.0);
            let poses: Vec<_> = (0..8).map(|i| cam_pose(0.15 * i as f64, 0.0, 0.0, 0.0)).collect();
            let (w, mut t) = scene(&poses, &point);
            for px in t.observations.values_mut() {
                px.u += noise.sample(&mut rng);
                px.v += noise.sample(&mut rng);
            }
            let est = optimize_depth(&w, &t, 9.0, &k(), &DepthConfig::default()).unwrap();
            let truth = poses[0].inverse().transform_point(&point).z;
            errs.push((est.d_hat - truth).abs() / truth);
        }
        errs.sort_by(f64::total_cmp);
        assert!(errs[50] < 0.01, "median relative error {}", errs[50]);
    }

    #[test]
    fn step_window_gate() {
        let point = Vector3::new(0.0, 0.0, 10.0);
        let poses: Vec<_> = (0..4).map(|i| cam_pose(0.3 * i as f64, 0.0, 0.0, 0.0)).collect();
        let (w, mut t) = scene(&poses, &point);
        let cfg = DepthConfig::default();
        let est = optimize_depth(&w, &t, 10.0, &k(), &cfg).unwrap();
        let f3 = t.observation(3).unwrap();
        let slow = cam_pose(0.96, 0.0, 0.0, 0.0);
        t.add_observation(4, Pixel::new(f3.u - 3.0, f3.v));
        let mut w2 = w.clone();
        let out = step_window(&mut w2, &t, &est, (4, slow), &k(), &cfg).unwrap();
        assert!(matches!(out, StepOutcome::Paused { parallax } if (parallax - 3.0).abs() < 1e-9));
        assert_eq!(w2, w);
        // Exactly 10 px: still paused.
        let edge = cam_pose(1.1, 0.0, 0.0, 0.0);
        t.add_observation(4, Pixel::new(f3.u - 10.0, f3.v));
        let out = step_window(&mut w2, &t, &est, (4, edge), &k(), &cfg).unwrap();
        assert!(matches!(out, StepOutcome::Paused { .. }), "{out:?}");
    }

    #[test]
    fn sliding_preserves_world_point() {
        let point = Vector3::new(0.3, 0.2, 10.0);
        let poses: Vec<_> = (0..8).map(|i| cam_pose(0.3 * i as f64, 0.01 * i as f64, 0.0, 0.0)).collect();
        let (full, t) = scene(&poses, &point);
        let cfg = DepthConfig {
            window_capacity: 4,
            ..DepthConfig::default()
        };
        let mut w = SlidingWindow::from_frames(4, full.frames().take(4).copied()).unwrap();
        let mut est = optimize_depth(&w, &t, 8.0, &k(), &cfg).unwrap();
        for i in 4..8u64 {
            let pose = *full.pose(i).unwrap();
            match step_window(&mut w, &t, &est, (i, pose), &k(), &cfg).unwrap() {
                StepOutcome::Advanced(e) => est = e,
                other => panic!("{other:?}"),
            }
            assert_eq!(w.reference(), Some(i - 3));
            assert!(w.len() <= 4);
            let mp = finalize_map_point(&t, &w, &est, &k(), &cfg).unwrap().unwrap();
            assert!((mp.position - point).norm() < 1e-6);
        }
    }

    #[test]
    fn finalize_gate_is_strict() {
        let (w, t, d) = six_frame();
        let cfg = DepthConfig::default();
        let mut est = optimize_depth(&w, &t, d, &k(), &cfg).unwrap();
        est.delta = 0.05;
        assert!(finalize_map_point(&t, &w, &est, &k(), &cfg).unwrap().is_some());
        est.delta = 0.1;
        assert!(finalize_map_point(&t, &w, &est, &k(), &cfg).unwrap().is_none());
    }

    #[test]
    fn noise_free_pipeline_map_point() {
        let point = Vector3::new(-0.6, 0.4, 12.0);
        let poses: Vec<_> = (0..6).map(|i| cam_pose(0.25 * i as f64, 0.0, 0.02 * i as f64, 0.004 * i as f64)).collect();
        let (w, t) = scene(&poses, &point);
        let cfg = DepthConfig::default();
        let d = triangulate(&t, &w, &k(), &cfg).unwrap();
        let est = optimize_depth(&w, &t, d, &k(), &cfg).unwrap();
        let mp = finalize_map_point(&t, &w, &est, &k(), &cfg).unwrap().unwrap();
        assert!((mp.position - point).norm() < 1e-3);
        // The map point reprojects onto its source observation.
        let pc = w.pose(mp.source_frame).unwrap().inverse().transform_point(&mp.position);
        assert!(project(&k(), &pc).unwrap().distance(t.observation(mp.source_frame).unwrap()) < 1.0);
    }

    #[test]
    fn window_rejects_non_increasing() {
        let mut w = SlidingWindow::new(3);
        w.push(1, Pose::identity()).unwrap();
        assert!(w.push(1, Pose::identity()).is_err());
        w.push(2, Pose::identity()).unwrap();
        w.push(3, Pose::identity()).unwrap();
        assert_eq!(w.push(4, Pose::identity()).unwrap().map(|f| f.0), Some(1));
        assert_eq!(w.indices(), vec![2, 3, 4]);
    }

    #[test]
    fn recovery_needs_two_prior_observations() {
        let poses = lateral_poses(3, 0.3);
        let (w, mut t) = scene(&poses, &Vector3::new(0.0, 0.0, 6.0));
        t.observations.retain(|&f, _| f == 1);
        let img = crate::image_front::GrayImage::filled(64, 64, 0.5);
        let pyr = crate::image_front::build_pyramid(&img).unwrap();
        let r = recover_feature(&mut t, &w, &pyr, &pyr, &k(), &DepthConfig::default());
        assert!(matches!(r, Err(DepthError::TooFewObservations { got: 1, .. })));
        assert_eq!(t.state, TrackState::Dropped);
    }

    #[test]
    fn track_dump_format() {
        let mut t = FeatureTrack::new(3, 10, Pixel::new(1.5, 2.0));
        t.add_observation(11, Pixel::new(2.25, 3.0));
        let mut buf = Vec::new();
        write_tracks(&mut buf, [&t]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3 10 1.5 2 tracking\n3 11 2.25 3 tracking\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn transfer_cycle_returns_depth(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let poses: Vec<_> = (0..3)
                .map(|_| cam_pose(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1)))
                .collect();
            let point = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(5.0..20.0));
            let (w, t) = scene(&poses, &point);
            let d0 = poses[0].inverse().transform_point(&point).z;
            let d1 = transfer_depth(d0, &t, 0, 1, &w, &k()).unwrap();
            let d2 = transfer_depth(d1, &t, 1, 2, &w, &k()).unwrap();
            let back = transfer_depth(d2, &t, 2, 0, &w, &k()).unwrap();
            prop_assert!((back - d0).abs() < 1e-9);
        }

        #[test]
        fn lm_cost_never_increases(seed in 0u64..10_000, scale in 0.5f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let (w, mut t, d) = six_frame();
            for px in t.observations.values_mut() {
                px.u += noise.sample(&mut rng);
                px.v += noise.sample(&mut rng);
            }
            let est = optimize_depth(&w, &t, d * scale, &k(), &DepthConfig::default()).unwrap();
            prop_assert!(est.final_cost <= est.initial_cost);
            prop_assert!(est.d_hat > 0.0);
        }

        #[test]
        fn identity_weights_match_ols(seed in 0u64..10_000, rows in 3usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(rows, 2, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
            let sys = EpipolarSystem {
                frames: (0..rows as u64).collect(),
                a: DMatrix::from_fn(rows, 3, |r, c| if c < 2 { x[(r, c)] } else { -y[r] }),
                x: x.clone(),
                y: y.clone(),
                e: DVector::zeros(rows - 1),
                w: DVector::from_element(rows, 1.0),
                underdetermined: false,
            };
            if let Ok(f) = solve_weighted(&sys, &DepthConfig::default()) {
                let xtx = x.transpose() * &x;
                let oracle = xtx.try_inverse().unwrap() * x.transpose() * &y;
                prop_assert!((f.u - oracle[0]).abs() < 1e-10 * (1.0 + oracle[0].abs()));
                prop_assert!((f.v - oracle[1]).abs() < 1e-10 * (1.0 + oracle[1].abs()));
            }
        }

        #[test]
        fn window_never_exceeds_capacity(cap in 2usize..12, n in 0usize..40) {
            let mut w = SlidingWindow::new(cap);
            for i in 0..n as u64 {
                w.push(i, Pose::identity()).unwrap();
                prop_assert!(w.len() <= cap);
                prop_assert_eq!(w.reference(), Some(i.saturating_sub(cap as u64 - 1)));
            }
        }
    }
}
