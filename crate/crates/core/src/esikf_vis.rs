//! Error-state iterated Kalman filter for the visual-inertial subsystem.
//!
//! The error state is ordered `(δθ, δp, δv, δb_a, δb_g)`. Rotations are
//! perturbed on the right: `R ⊞ δθ = R Exp(δθ)`. The measurement stacks
//! reprojection residuals of converged feature map points followed by those
//! of plane centroids.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_so3, log_so3, right_jacobian_inv, skew, Camera, Pixel, Pose};
use crate::plane_map::PlaneCentroid;

pub const STATE_DIM: usize = 15;
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

pub type ErrorState = SVector<f64, STATE_DIM>;
pub type Covariance = SMatrix<f64, STATE_DIM, STATE_DIM>;

const ROT: usize = 0;
const POS: usize = 3;
const VEL: usize = 6;
const BA: usize = 9;
const BG: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("no IMU samples")]
    NoImu,
    #[error("IMU timestamps must increase strictly ({prev} then {next})")]
    NonIncreasingTime { prev: f64, next: f64 },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// Body-to-world pose.
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
}

impl NavState {
    pub fn new(pose: Pose, velocity: Vector3<f64>) -> Self {
        Self {
            pose,
            velocity,
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.rotation.iter().all(|v| v.is_finite())
            && self.pose.translation.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.bias_accel.iter().all(|v| v.is_finite())
            && self.bias_gyro.iter().all(|v| v.is_finite())
    }
}

fn block3(v: &ErrorState, at: usize) -> Vector3<f64> {
    Vector3::new(v[at], v[at + 1], v[at + 2])
}

fn set3(v: &mut ErrorState, at: usize, x: &Vector3<f64>) {
    v[at] = x.x;
    v[at + 1] = x.y;
    v[at + 2] = x.z;
}

pub fn boxplus(x: &NavState, d: &ErrorState) -> NavState {
    let mut pose = x.pose;
    pose.rotation = x.pose.rotation * exp_so3(&block3(d, ROT));
    pose.translation += block3(d, POS);
    NavState {
        pose,
        velocity: x.velocity + block3(d, VEL),
        bias_accel: x.bias_accel + block3(d, BA),
        bias_gyro: x.bias_gyro + block3(d, BG),
    }
}

/// `x2 ⊟ x1`.
pub fn boxminus(x2: &NavState, x1: &NavState) -> ErrorState {
    let mut d = ErrorState::zeros();
    set3(&mut d, ROT, &log_so3(&(x1.pose.rotation.transpose() * x2.pose.rotation)));
    set3(&mut d, POS, &(x2.pose.translation - x1.pose.translation));
    set3(&mut d, VEL, &(x2.velocity - x1.velocity));
    set3(&mut d, BA, &(x2.bias_accel - x1.bias_accel));
    set3(&mut d, BG, &(x2.bias_gyro - x1.bias_gyro));
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame (m/s²).
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame (rad/s).
    pub gyro: Vector3<f64>,
}

/// Continuous-time noise densities. Process noise per step is `σ² dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s³/√Hz
    pub accel_walk: f64,
    /// rad/s²/√Hz
    pub gyro_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_noise: 0.02,
            gyro_noise: 0.002,
            accel_walk: 0.001,
            gyro_walk: 0.0001,
        }
    }
}

/// Propagate state and covariance through consecutive IMU samples using
/// midpoint integration of bias-corrected rates.
///
/// The state is taken to be at `imu[0].t` and is returned at the last
/// sample's time.
pub fn propagate(
    x: &NavState,
    cov: &Covariance,
    imu: &[ImuSample],
    gravity: &Vector3<f64>,
    noise: &ImuNoise,
) -> Result<(NavState, Covariance), FilterError> {
    if imu.is_empty() {
        return Err(FilterError::NoImu);
    }
    let mut s = *x;
    let mut p = *cov;
    for pair in imu.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.t - a.t;
        if !(dt > 0.0) {
            return Err(FilterError::NonIncreasingTime { prev: a.t, next: b.t });
        }
        let r0 = s.pose.rotation;
        let w = 0.5 * (a.gyro + b.gyro) - s.bias_gyro;
        let r1 = r0 * exp_so3(&(w * dt));
        let acc0 = a.accel - s.bias_accel;
        let acc1 = b.accel - s.bias_accel;
        let aw = 0.5 * (r0 * acc0 + r1 * acc1) + gravity;
        s.pose.translation += s.velocity * dt + 0.5 * aw * dt * dt;
        s.velocity += aw * dt;
        s.pose.rotation = r1;

        let acc = 0.5 * (acc0 + acc1);
        let mut f = Covariance::identity();
        f.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&(Matrix3::identity() - skew(&(w * dt))));
        f.fixed_view_mut::<3, 3>(ROT, BG).copy_from(&(-Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(VEL, ROT).copy_from(&(-r0 * skew(&acc) * dt));
        f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-r0 * dt));
        let mut q = Covariance::zeros();
        for i in 0..3 {
            q[(ROT + i, ROT + i)] = noise.gyro_noise.powi(2) * dt;
            q[(VEL + i, VEL + i)] = noise.accel_noise.powi(2) * dt;
            q[(BA + i, BA + i)] = noise.accel_walk.powi(2) * dt;
            q[(BG + i, BG + i)] = noise.gyro_walk.powi(2) * dt;
        }
        p = f * p * f.transpose() + q;
        p = 0.5 * (p + p.transpose());
    }
    Ok((s, p))
}

/// Centroids in front of the camera at `x_prev` together with their
/// projections, keeping those inside the image.
pub fn project_centroids(
    x_prev: &NavState,
    centroids: &[PlaneCentroid],
    camera: &Camera,
) -> Vec<(PlaneCentroid, Pixel)> {
    let world_to_cam = camera.world_pose(&x_prev.pose).inverse();
    centroids
        .iter()
        .filter_map(|c| {
            let pc = world_to_cam.transform_point(&c.position);
            if !(pc.z > 0.0) {
                return None;
            }
            let px = camera.intrinsics.project_unchecked(&pc);
            camera.in_image(px, 0.0).then(|| (c.clone(), px))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HybridMeasurement {
    /// (world point, observed pixel) of converged feature tracks.
    pub feature_terms: Vec<(Vector3<f64>, Pixel)>,
    /// (world centroid, observed pixel) of tracked projection points.
    pub centroid_terms: Vec<(Vector3<f64>, Pixel)>,
}

impl HybridMeasurement {
    pub fn len(&self) -> usize {
        self.feature_terms.len() + self.centroid_terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn terms(&self) -> impl Iterator<Item = (TermKind, &(Vector3<f64>, Pixel))> {
        self.feature_terms
            .iter()
            .map(|t| (TermKind::Feature, t))
            .chain(self.centroid_terms.iter().map(|t| (TermKind::Centroid, t)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Feature,
    Centroid,
}

/// Stacked residuals with the terms that survived the cheirality check.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub r: DVector<f64>,
    /// Kind of each kept term, in stacking order.
    pub kinds: Vec<TermKind>,
    pub dropped: usize,
}

const MIN_DEPTH: f64 = 1e-6;

/// Camera-frame point and `∂p_c/∂(δθ, δp)` for one world point.
fn term_geometry(x: &NavState, camera: &Camera, pw: &Vector3<f64>) -> (Vector3<f64>, SMatrix<f64, 3, 6>) {
    let rwb = x.pose.rotation;
    let pb = rwb.transpose() * (pw - x.pose.translation);
    let rbc = camera.cam_to_body.rotation;
    let pc = rbc.transpose() * (pb - camera.cam_to_body.translation);
    let mut d = SMatrix::<f64, 3, 6>::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rbc.transpose() * skew(&pb)));
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rbc.transpose() * rwb.transpose()));
    (pc, d)
}

fn projection_jacobian(camera: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &camera.intrinsics;
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    )
}

/// `K π(p_c) − observed` per term, features first then centroids. Terms
/// behind the camera are dropped and counted.
pub fn residual_hybrid(x: &NavState, m: &HybridMeasurement, camera: &Camera) -> Residuals {
    let mut r = Vec::with_capacity(2 * m.len());
    let mut kinds = Vec::with_capacity(m.len());
    let mut dropped = 0;
    for (kind, (pw, obs)) in m.terms() {
        let (pc, _) = term_geometry(x, camera, pw);
        if !(pc.z > MIN_DEPTH) {
            dropped += 1;
            continue;
        }
        let px = camera.intrinsics.project_unchecked(&pc);
        r.push(px.u - obs.u);
        r.push(px.v - obs.v);
        kinds.push(kind);
    }
    Residuals {
        r: DVector::from_vec(r),
        kinds,
        dropped,
    }
}

/// Analytic `∂r/∂δx` at `δx = 0`, rows matching [`residual_hybrid`].
pub fn measurement_jacobian(x: &NavState, m: &HybridMeasurement, camera: &Camera) -> DMatrix<f64> {
    let mut rows: Vec<SMatrix<f64, 2, 6>> = Vec::with_capacity(m.len());
    for (_, (pw, _)) in m.terms() {
        let (pc, d) = term_geometry(x, camera, pw);
        if !(pc.z > MIN_DEPTH) {
            continue;
        }
        rows.push(projection_jacobian(camera, &pc) * d);
    }
    let mut h = DMatrix::zeros(2 * rows.len(), STATE_DIM);
    for (i, b) in rows.iter().enumerate() {
        h.view_mut((2 * i, 0), (2, 6)).copy_from(b);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Feature reprojection noise variance (px²).
    pub sigma_feature: f64,
    /// Centroid projection-point noise variance (px²).
    pub sigma_centroid: f64,
    pub imu: ImuNoise,
    pub max_iterations: usize,
    pub convergence_eps: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            sigma_feature: 1.0,
            sigma_centroid: 2.0,
            imu: ImuNoise::default(),
            max_iterations: 5,
            convergence_eps: 1e-6,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.sigma_feature > 0.0 && self.sigma_centroid > 0.0) {
            return Err(FilterError::InvalidConfig("measurement variances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(FilterError::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }

    fn variance(&self, kind: TermKind) -> f64 {
        match kind {
            TermKind::Feature => self.sigma_feature,
            TermKind::Centroid => self.sigma_centroid,
        }
    }
}

/// One iterated-Kalman step on a linearized problem of any dimension.
///
/// With residual `z` (predicted − observed), Jacobian `h`, diagonal
/// measurement variances `r`, mapped prior covariance `p` and the mapped
/// prior offset `prior = 𝓗⁻¹ (x̌ ⊟ x̂)`, returns
/// `δ = −K z − (I − K H) prior` and `K = (HᵀR⁻¹H + P⁻¹)⁻¹ HᵀR⁻¹`.
/// `None` when the normal matrix or `P` is singular.
pub fn kalman_step(
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    p: &DMatrix<f64>,
    prior: &DVector<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = p.nrows();
    let p_inv = p.clone().cholesky()?.inverse();
    let ht_rinv = {
        let mut m = h.transpose();
        for (j, rj) in r.iter().enumerate() {
            if !(*rj > 0.0) {
                return None;
            }
            m.column_mut(j).scale_mut(1.0 / rj);
        }
        m
    };
    let normal = &ht_rinv * h + p_inv;
    let normal_inv = normal.cholesky()?.inverse();
    let k = normal_inv * ht_rinv;
    let ikh = DMatrix::identity(n, n) - &k * h;
    let delta = -(&k * z) - ikh * prior;
    delta.iter().all(|v| v.is_finite()).then_some((delta, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub state: NavState,
    pub cov: Covariance,
    pub iterations: usize,
    /// The update was rejected because the normal matrix was singular.
    pub degraded: bool,
    /// Terms used at the final linearization.
    pub terms_used: usize,
    pub dropped_terms: usize,
    /// MAP cost at each accepted iterate, starting with the prior.
    pub costs: Vec<f64>,
}

fn rotation_mapping_inv(d: &ErrorState) -> Covariance {
    let jr_inv = right_jacobian_inv(&block3(d, ROT));
    let mut hinv = Covariance::identity();
    let jr = jr_inv.try_inverse().unwrap_or_else(Matrix3::identity);
    hinv.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&jr);
    hinv
}

fn to_dyn(m: &Covariance) -> DMatrix<f64> {
    DMatrix::from_column_slice(STATE_DIM, STATE_DIM, m.as_slice())
}

/// `(x ⊟ x̂)ᵀ Σ⁻¹ (x ⊟ x̂) + zᵀ R⁻¹ z`, or `None` if a term leaves the
/// camera's front.
fn map_cost(
    x: &NavState,
    prior: &NavState,
    sigma_inv: &Covariance,
    m: &HybridMeasurement,
    camera: &Camera,
    cfg: &FilterConfig,
    expect_terms: usize,
) -> Option<f64> {
    let d = boxminus(x, prior);
    let res = residual_hybrid(x, m, camera);
    if res.kinds.len() < expect_terms {
        return None;
    }
    let mut c = (d.transpose() * sigma_inv * d)[0];
    for (i, kind) in res.kinds.iter().enumerate() {
        let v = cfg.variance(*kind);
        c += (res.r[2 * i].powi(2) + res.r[2 * i + 1].powi(2)) / v;
    }
    Some(c)
}

/// Iterated error-state update of the prior `(x̂, Σ)` with a hybrid
/// measurement. Each step is backtracked so the MAP cost never increases.
pub fn iterated_update(
    x_hat: &NavState,
    sigma: &Covariance,
    m: &HybridMeasurement,
    camera: &Camera,
    cfg: &FilterConfig,
) -> UpdateResult {
    let mut result = UpdateResult {
        state: *x_hat,
        cov: *sigma,
        iterations: 0,
        degraded: false,
        terms_used: 0,
        dropped_terms: 0,
        costs: Vec::new(),
    };
    if m.is_empty() {
        return result;
    }
    let Some(sigma_inv) = sigma.cholesky().map(|c| c.inverse()) else {
        result.degraded = true;
        return result;
    };
    let sigma_dyn = to_dyn(sigma);

    let linearize = |x: &NavState| {
        let res = residual_hybrid(x, m, camera);
        let h = measurement_jacobian(x, m, camera);
        let r = DVector::from_iterator(
            2 * res.kinds.len(),
            res.kinds.iter().flat_map(|k| {
                let v = cfg.variance(*k);
                [v, v]
            }),
        );
        let d = boxminus(x, x_hat);
        let hinv = to_dyn(&rotation_mapping_inv(&d));
        let p = &hinv * &sigma_dyn * hinv.transpose();
        let prior = &hinv * DVector::from_column_slice(d.as_slice());
        (res, h, r, p, prior)
    };

    let mut x = *x_hat;
    let mut cost = match map_cost(&x, x_hat, &sigma_inv, m, camera, cfg, 0) {
        Some(c) => c,
        None => {
            result.degraded = true;
            return result;
        }
    };
    result.costs.push(cost);
    for _ in 0..cfg.max_iterations {
        let (res, h, r, p, prior) = linearize(&x);
        if res.kinds.is_empty() {
            break;
        }
        let Some((delta, _)) = kalman_step(&res.r, &h, &r, &p, &prior) else {
            result.degraded = true;
            result.state = *x_hat;
            result.cov = *sigma;
            result.dropped_terms = res.dropped;
            return result;
        };
        result.iterations += 1;
        let delta = ErrorState::from_column_slice(delta.as_slice());
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let cand = boxplus(&x, &(delta * alpha));
            if let Some(c) = map_cost(&cand, x_hat, &sigma_inv, m, camera, cfg, res.kinds.len()) {
                if c <= cost {
                    accepted = Some((cand, c));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            break;
        };
        x = cand;
        cost = c;
        result.costs.push(c);
        if (delta * alpha).norm() < cfg.convergence_eps {
            break;
        }
    }

    let (res, h, r, p, prior) = linearize(&x);
    result.dropped_terms = res.dropped;
    result.terms_used = res.kinds.len();
    result.state = x;
    if res.kinds.is_empty() {
        return result;
    }
    match kalman_step(&res.r, &h, &r, &p, &prior) {
        Some((_, k)) => {
            let post = (DMatrix::identity(STATE_DIM, STATE_DIM) - k * h) * p;
            let post = 0.5 * (&post + post.transpose());
            result.cov = Covariance::from_column_slice(post.as_slice());
        }
        None => {
            result.degraded = true;
            result.state = *x_hat;
            result.cov = *sigma;
        }
    }
    result
}
