//! Lie-group and projective primitives.
//!
//! Conventions used throughout the crate:
//!
//! * [`RigidPose`] stores a world-from-camera transform unless a name says
//!   otherwise (`T_cw` arguments are camera-from-world).
//! * Tangent vectors of a pose are ordered `[rotation; translation]`.
//! * The pose retraction is `R <- R * Exp(dtheta)`, `t <- t + dt`, i.e. a
//!   right perturbation of the rotation and a world-frame perturbation of the
//!   translation. Every analytic Jacobian in the crate uses this convention.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Angle above which [`so3_log`] switches to the symmetric-part axis extraction.
const NEAR_PI: f64 = std::f64::consts::PI - 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("insufficient parallax: {parallax_deg:.4} deg < {threshold_deg:.4} deg")]
    InsufficientParallax {
        parallax_deg: f64,
        threshold_deg: f64,
    },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a x b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Orthonormal 3x3 rotation matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Projects an arbitrary matrix onto SO(3) via SVD.
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        let svd = SVD::new(*m, true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn exp(omega: &Vector3<f64>) -> Self {
        so3_exp(omega)
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(q.to_rotation_matrix().into_inner())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.0)
    }

    /// Max deviation of `R^T R` from identity and of `det(R)` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Matrix3::identity())
            .abs()
            .max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Rodrigues formula. Any `omega` is accepted; angles of pi or more map back
/// to the principal representative when passed through [`so3_log`].
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    let (a, b) = if theta2 < 1e-10 {
        // Taylor expansion of sin(t)/t and (1 - cos(t))/t^2.
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal axis-angle vector with norm in `[0, pi]`.
///
/// Near pi the `sin(theta)` denominator blows up, so the axis is recovered
/// from the symmetric part `(R + R^T)/2 = cos(t) I + (1 - cos(t)) a a^T`, with
/// its sign fixed by the skew part.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    if theta < 1e-5 {
        // theta / (2 sin theta) ~ 1/2 + theta^2/12
        return skew * (0.5 + theta * theta / 12.0);
    }
    if theta < NEAR_PI {
        return skew * (theta / (2.0 * theta.sin()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let one_minus_cos = 1.0 - cos_theta;
    // Pick the best-conditioned column of a a^T.
    let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let i = diag.imax();
    let mut axis = Vector3::zeros();
    let aii = ((diag[i] - cos_theta) / one_minus_cos).max(0.0).sqrt();
    axis[i] = aii;
    for j in 0..3 {
        if j != i {
            axis[j] = sym[(i, j)] / (one_minus_cos * aii);
        }
    }
    axis.normalize_mut();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() + k * 0.5 + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidPose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Applies the crate-wide retraction with tangent `[dtheta; dt]`.
    pub fn retract(&self, delta: &[f64]) -> RigidPose {
        let dtheta = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        RigidPose {
            rotation: self.rotation * so3_exp(&dtheta),
            translation: self.translation + dt,
        }
    }

    /// SE(3) logarithm `[omega; rho]` with `T = exp([omega; rho])`.
    pub fn log(&self) -> [f64; 6] {
        let omega = self.rotation.log();
        let v_inv = se3_left_jacobian_so3_inv(&omega);
        let rho = v_inv * self.translation;
        [omega.x, omega.y, omega.z, rho.x, rho.y, rho.z]
    }

    /// SE(3) exponential of `[omega; rho]`.
    pub fn exp(xi: &[f64; 6]) -> RigidPose {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let rho = Vector3::new(xi[3], xi[4], xi[5]);
        RigidPose {
            rotation: so3_exp(&omega),
            translation: se3_left_jacobian_so3(&omega) * rho,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Mul for RigidPose {
    type Output = RigidPose;
    fn mul(self, rhs: RigidPose) -> RigidPose {
        self.compose(&rhs)
    }
}

/// Left Jacobian of SO(3) (the `V` matrix of the SE(3) exponential).
fn se3_left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    if theta2 < 1e-10 {
        return Matrix3::identity() + k * 0.5 + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity()
        + k * ((1.0 - theta.cos()) / theta2)
        + k * k * ((theta - theta.sin()) / (theta2 * theta))
}

fn se3_left_jacobian_so3_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    if theta2 < 1e-10 {
        return Matrix3::identity() - k * 0.5 + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    let c = (1.0 - half * half.cos() / half.sin()) / theta2;
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// `T_i^{-1} T_j`, so that `T_i * relative_pose(T_i, T_j) == T_j`.
pub fn relative_pose(t_i: &RigidPose, t_j: &RigidPose) -> RigidPose {
    t_i.inverse().compose(t_j)
}

/// Similarity transform in Sim(3): `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: -rt.rotate(&self.translation) * inv_s,
        }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) * self.scale + self.translation,
        }
    }

    /// Maps a world-from-camera pose through the similarity.
    pub fn apply_to_pose(&self, pose: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * pose.rotation,
            translation: self.apply(&pose.translation),
        }
    }
}

/// Pinhole intrinsics with image bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point to pixel. Errors on non-positive depth.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(pc.z > 0.0) {
            return Err(GeometryError::BehindCamera { depth: pc.z });
        }
        Ok(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    /// Pixel to unit-depth normalized coordinates `(x, y, 1)`.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x <= self.width && pixel.y >= 0.0 && pixel.y <= self.height
    }
}

/// Projects a world point with a camera-from-world pose.
pub fn project(
    k: &CameraIntrinsics,
    t_cw: &RigidPose,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    k.project_camera(&t_cw.transform_point(p))
}

/// Default parallax gate for triangulation, in degrees.
pub const DEFAULT_MIN_PARALLAX_DEG: f64 = 1.0;

/// Two-view linear least-squares triangulation with world-from-camera poses.
///
/// The parallax is the angle between the two viewing rays expressed in the
/// world frame; it must reach `min_parallax_deg`.
pub fn triangulate(
    t_a: &RigidPose,
    t_b: &RigidPose,
    k: &CameraIntrinsics,
    pix_a: &Vector2<f64>,
    pix_b: &Vector2<f64>,
    min_parallax_deg: f64,
) -> Result<Vector3<f64>, GeometryError> {
    let ray_a = t_a.rotation.rotate(&k.unproject(pix_a)).normalize();
    let ray_b = t_b.rotation.rotate(&k.unproject(pix_b)).normalize();
    let baseline = (t_a.translation - t_b.translation).norm();
    let parallax_deg = ray_a.dot(&ray_b).clamp(-1.0, 1.0).acos().to_degrees();
    let scale = 1.0 + t_a.translation.norm().max(t_b.translation.norm());
    if baseline <= 1e-12 * scale || parallax_deg < min_parallax_deg {
        return Err(GeometryError::InsufficientParallax {
            parallax_deg: if baseline <= 1e-12 * scale {
                0.0
            } else {
                parallax_deg
            },
            threshold_deg: min_parallax_deg,
        });
    }

    // Rows x * P3 - P1, y * P3 - P2 for each view, with P = [R^T | -R^T t]
    // and x, y normalized image coordinates.
    let mut a = Matrix4::zeros();
    for (view, (pose, pix)) in [(t_a, pix_a), (t_b, pix_b)].into_iter().enumerate() {
        let cw = pose.inverse().to_homogeneous();
        let n = k.unproject(pix);
        let p1 = cw.row(0);
        let p2 = cw.row(1);
        let p3 = cw.row(2);
        a.set_row(2 * view, &(p3 * n.x - p1));
        a.set_row(2 * view + 1, &(p3 * n.y - p2));
    }
    // Smallest eigenvector of A^T A is the homogeneous solution.
    let ata = a.transpose() * a;
    let eig = ata.symmetric_eigen();
    let idx = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(idx);
    if h[3].abs() < 1e-15 {
        return Err(GeometryError::InsufficientParallax {
            parallax_deg,
            threshold_deg: min_parallax_deg,
        });
    }
    let p = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    for pose in [t_a, t_b] {
        let depth = pose.inverse().transform_point(&p).z;
        if !(depth > 0.0) {
            return Err(GeometryError::BehindCamera { depth });
        }
    }
    Ok(p)
}
