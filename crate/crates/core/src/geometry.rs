//! Rigid-body frame algebra, the pinhole camera model and the handful of
//! SO(3) helpers the filter needs.
//!
//! A [`Pose`] maps coordinates expressed in `from` into coordinates expressed
//! in `to`: `p_to = R * p_from + t`. Composition follows the matrix chain rule
//! `T_a^c = T_b^c * T_a^b`, exposed here as [`compose`]`(a_to_b, b_to_c)`.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: cannot chain a pose ending in {left:?} with one starting in {right:?}")]
    FrameMismatch { left: Frame, right: Frame },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Coordinate frame label carried by a [`Pose`].
///
/// Labels are only checked when debug assertions are enabled. `Unlabeled`
/// matches anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    World,
    Body,
    Camera,
    Lidar,
    /// Body (image) frame at a given frame index.
    BodyAt(u64),
    /// Camera frame at a given frame index.
    CameraAt(u64),
    Unlabeled,
}

impl Frame {
    fn matches(self, other: Frame) -> bool {
        self == Frame::Unlabeled || other == Frame::Unlabeled || self == other
    }
}

/// Rigid transform from `from` coordinates into `to` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub from: Frame,
    pub to: Frame,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            from: Frame::Unlabeled,
            to: Frame::Unlabeled,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(*q.to_rotation_matrix().matrix(), translation)
    }

    /// Attach frame labels.
    pub fn labeled(mut self, from: Frame, to: Frame) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    /// Unit quaternion of the rotation, with a non-negative scalar part.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    /// `‖RᵀR − I‖` (Frobenius) together with the determinant check.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        e + (self.rotation.determinant() - 1.0).abs()
    }

    pub fn is_valid(&self) -> bool {
        self.orthonormality_error() < 1e-9
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Chain `self` (a→b) with `next` (b→c), yielding a→c.
    pub fn compose(&self, next: &Pose) -> Result<Pose, GeometryError> {
        #[cfg(debug_assertions)]
        if !self.to.matches(next.from) {
            return Err(GeometryError::FrameMismatch {
                left: self.to,
                right: next.from,
            });
        }
        Ok(self.then(next))
    }

    /// Like [`Pose::compose`] but without the label check (debug-asserted).
    pub fn then(&self, next: &Pose) -> Pose {
        debug_assert!(
            self.to.matches(next.from),
            "frame mismatch {:?} -> {:?}",
            self.to,
            next.from
        );
        Pose {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
            from: self.from,
            to: next.to,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            from: self.to,
            to: self.from,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        Pose::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

/// `compose(a_to_b, b_to_c) = a_to_c`.
pub fn compose(a_to_b: &Pose, b_to_c: &Pose) -> Result<Pose, GeometryError> {
    a_to_b.compose(b_to_c)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn to_homogeneous(t: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(t.x, t.y, t.z, 1.0)
}

/// Skew-symmetric matrix with `skew(v) * w == v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    /// `[u, v, 1]`.
    pub fn homogeneous(self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn distance(self, other: Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl std::ops::Add for Pixel {
    type Output = Pixel;
    fn add(self, o: Pixel) -> Pixel {
        Pixel::new(self.u + o.u, self.v + o.v)
    }
}

impl std::ops::Sub for Pixel {
    type Output = Pixel;
    fn sub(self, o: Pixel) -> Pixel {
        Pixel::new(self.u - o.u, self.v - o.v)
    }
}

impl std::ops::Mul<f64> for Pixel {
    type Output = Pixel;
    fn mul(self, s: f64) -> Pixel {
        Pixel::new(self.u * s, self.v * s)
    }
}

/// Pinhole intrinsics. Images are assumed rectified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹`.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ [u, v, 1]ᵀ`, the bearing with unit z.
    pub fn normalized(&self, px: Pixel) -> Vector3<f64> {
        Vector3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }

    /// Projection without the cheirality check; `z` must be nonzero.
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Pixel {
        Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

pub fn project(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<Pixel, GeometryError> {
    if !(p_cam.z > 0.0) {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    Ok(k.project_unchecked(p_cam))
}

/// Point at `depth` (z-coordinate) along the ray through `px`.
pub fn backproject(
    k: &CameraIntrinsics,
    px: Pixel,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(k.normalized(px) * depth)
}

/// Rodrigues exponential map.
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Logarithm map, well defined up to and including rotations by π.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < 1e-12 {
        return 2.0 * v / w;
    }
    v * (2.0 * n.atan2(w) / n)
}

/// Inverse of the SO(3) right Jacobian.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Intrinsics, image size and mounting of a body-fixed camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Camera-to-body extrinsic.
    pub cam_to_body: Pose,
}

impl Camera {
    /// Camera-to-world pose for a body-to-world pose.
    pub fn world_pose(&self, body_to_world: &Pose) -> Pose {
        self.cam_to_body.then(body_to_world)
    }

    pub fn in_image(&self, px: Pixel, margin: f64) -> bool {
        px.is_finite()
            && px.u >= margin
            && px.v >= margin
            && px.u <= self.width as f64 - 1.0 - margin
            && px.v <= self.height as f64 - 1.0 - margin
    }
}

/// Rotation from intrinsic Z-Y-X Euler angles (yaw, pitch, roll).
pub fn rotation_zyx(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let rz = exp_so3(&Vector3::new(0.0, 0.0, yaw));
    let ry = exp_so3(&Vector3::new(0.0, pitch, 0.0));
    let rx = exp_so3(&Vector3::new(roll, 0.0, 0.0));
    rz * ry * rx
}
