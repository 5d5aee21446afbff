//! Residuals and analytic Jacobians of the backend factors.
//!
//! Pose tangents follow the crate convention `[dtheta; dt]` with
//! `R <- R Exp(dtheta)` and `t <- t + dt`.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};

use crate::geometry::{
    hat, relative_pose, so3_log, so3_right_jacobian_inv, CameraIntrinsics, GeometryError,
    RigidPose, Rotation,
};

pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Raw relative pose predicted for a keyframe pair, in predictor units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeMeasurement {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RelativeMeasurement {
    pub fn from_pose(p: &RigidPose) -> Self {
        Self {
            rotation: p.rotation,
            translation: p.translation,
        }
    }
}

/// Scale-aware relative-pose residual
/// `[Log(dR^T R_p); t_p - s dt]` with `[R_p, t_p] = T_i^{-1} T_j`.
pub fn scale_relative_residual(
    t_i: &RigidPose,
    t_j: &RigidPose,
    s: f64,
    pred: &RelativeMeasurement,
) -> Vector6<f64> {
    let rel = relative_pose(t_i, t_j);
    let r_theta = so3_log(&(pred.rotation.transpose() * rel.rotation));
    let r_t = rel.translation - pred.translation * s;
    Vector6::new(r_theta.x, r_theta.y, r_theta.z, r_t.x, r_t.y, r_t.z)
}

/// Jacobians of [`scale_relative_residual`] w.r.t. `T_i`, `T_j` (6x6) and
/// `s` (6x1, exactly `[0; -dt]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeJacobians {
    pub d_pose_i: Matrix6,
    pub d_pose_j: Matrix6,
    pub d_scale: Vector6<f64>,
}

pub fn scale_relative_jacobians(
    t_i: &RigidPose,
    t_j: &RigidPose,
    _s: f64,
    pred: &RelativeMeasurement,
) -> RelativeJacobians {
    let rel = relative_pose(t_i, t_j);
    let r_theta = so3_log(&(pred.rotation.transpose() * rel.rotation));
    let jr_inv = so3_right_jacobian_inv(&r_theta);
    let ri_t = t_i.rotation.transpose();

    let mut d_pose_i = Matrix6::zeros();
    d_pose_i
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * rel.rotation.matrix().transpose()));
    d_pose_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&hat(&rel.translation));
    d_pose_i
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-ri_t.matrix()));

    let mut d_pose_j = Matrix6::zeros();
    d_pose_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    d_pose_j
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(ri_t.matrix());

    let dt = pred.translation;
    RelativeJacobians {
        d_pose_i,
        d_pose_j,
        d_scale: Vector6::new(0.0, 0.0, 0.0, -dt.x, -dt.y, -dt.z),
    }
}

/// Pose prior residual `[Log(R_prior^T R); t - t_prior]` and its Jacobian.
pub fn pose_prior_residual(pose: &RigidPose, prior: &RigidPose) -> (Vector6<f64>, Matrix6) {
    let r_theta = so3_log(&(prior.rotation.transpose() * pose.rotation));
    let r_t = pose.translation - prior.translation;
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&so3_right_jacobian_inv(&r_theta));
    j.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&Matrix3::identity());
    (
        Vector6::new(r_theta.x, r_theta.y, r_theta.z, r_t.x, r_t.y, r_t.z),
        j,
    )
}

/// Reprojection residual `z - pi(T_wc^{-1} p)` with Jacobians w.r.t. the
/// world-from-camera pose and the point.
pub fn reprojection_residual(
    camera: &CameraIntrinsics,
    pose_wc: &RigidPose,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
) -> Result<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>), GeometryError> {
    let rt = pose_wc.rotation.transpose();
    let pc = rt.rotate(&(point - pose_wc.translation));
    let proj = camera.project_camera(&pc)?;
    let r = pixel - proj;
    let inv_z = 1.0 / pc.z;
    let d_proj = Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * pc.x * inv_z * inv_z,
        0.0,
        camera.fy * inv_z,
        -camera.fy * pc.y * inv_z * inv_z,
    );
    let mut d_pose = Matrix2x6::zeros();
    d_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-d_proj * hat(&pc)));
    d_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(d_proj * rt.matrix()));
    let d_point = -d_proj * rt.matrix();
    Ok((r, d_pose, d_point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        RigidPose::new(
            so3_exp(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )),
            Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        )
    }

    /// Straightforward evaluation of the residual with explicit matrices.
    fn residual_oracle(
        t_i: &RigidPose,
        t_j: &RigidPose,
        s: f64,
        pred: &RelativeMeasurement,
    ) -> Vector6<f64> {
        let ti = t_i.to_homogeneous();
        let tj = t_j.to_homogeneous();
        let dp = ti.try_inverse().unwrap() * tj;
        let rp = dp.fixed_view::<3, 3>(0, 0).into_owned();
        let tp = dp.fixed_view::<3, 1>(0, 3).into_owned();
        let e = pred.rotation.matrix().transpose() * rp;
        let rot = nalgebra::Rotation3::from_matrix_unchecked(e).scaled_axis();
        let rt = tp - pred.translation * s;
        Vector6::new(rot.x, rot.y, rot.z, rt.x, rt.y, rt.z)
    }

    #[test]
    fn residual_trivial_cases() {
        let id = RigidPose::identity();
        let m = RelativeMeasurement {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        };
        assert_eq!(scale_relative_residual(&id, &id, 1.0, &m), Vector6::zeros());
        let tj = RigidPose::from_translation(Vector3::new(2.0, 0.0, 0.0));
        let m = RelativeMeasurement {
            rotation: Rotation::identity(),
            translation: Vector3::new(1.0, 0.0, 0.0),
        };
        assert_eq!(scale_relative_residual(&id, &tj, 2.0, &m), Vector6::zeros());
    }

    #[test]
    fn residual_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (a, b) = (rand_pose(&mut rng), rand_pose(&mut rng));
            let m = RelativeMeasurement::from_pose(&rand_pose(&mut rng));
            let s = rng.random_range(0.1..5.0);
            let r = scale_relative_residual(&a, &b, s, &m);
            let o = residual_oracle(&a, &b, s, &m);
            assert!((r - o).abs().max() < 1e-12, "{r} vs {o}");
        }
    }

    #[test]
    fn scale_jacobian_direct() {
        let id = RigidPose::identity();
        let m = RelativeMeasurement {
            rotation: Rotation::identity(),
            translation: Vector3::new(1.0, 2.0, 3.0),
        };
        let j = scale_relative_jacobians(&id, &id, 1.0, &m);
        assert_eq!(j.d_scale, Vector6::new(0.0, 0.0, 0.0, -1.0, -2.0, -3.0));
        let m0 = RelativeMeasurement {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        };
        assert_eq!(
            scale_relative_jacobians(&id, &id, 1.0, &m0).d_scale,
            Vector6::zeros()
        );
    }

    #[test]
    fn pose_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..100 {
            let (a, b) = (rand_pose(&mut rng), rand_pose(&mut rng));
            let m = RelativeMeasurement::from_pose(
                &rand_pose(&mut rng).compose(&RigidPose::identity()),
            );
            let s = rng.random_range(0.5..2.0);
            let j = scale_relative_jacobians(&a, &b, s, &m);
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let mut dm = [0.0; 6];
                dm[k] = -h;
                let fd_i = (scale_relative_residual(&a.retract(&d), &b, s, &m)
                    - scale_relative_residual(&a.retract(&dm), &b, s, &m))
                    / (2.0 * h);
                let fd_j = (scale_relative_residual(&a, &b.retract(&d), s, &m)
                    - scale_relative_residual(&a, &b.retract(&dm), s, &m))
                    / (2.0 * h);
                let err_i = (fd_i - j.d_pose_i.column(k)).norm() / fd_i.norm().max(1.0);
                let err_j = (fd_j - j.d_pose_j.column(k)).norm() / fd_j.norm().max(1.0);
                assert!(err_i < 1e-5 && err_j < 1e-5, "col {k}: {err_i} {err_j}");
            }
        }
    }

    #[test]
    fn reprojection_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = CameraIntrinsics::default();
        let h = 1e-6;
        for _ in 0..100 {
            let pose = RigidPose::new(
                so3_exp(&Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            );
            let pc = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(3.0..6.0),
            );
            let point = pose.transform_point(&pc);
            let pixel = Vector2::new(300.0, 200.0);
            let (_, jp, jx) = reprojection_residual(&cam, &pose, &point, &pixel).unwrap();
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let mut dm = [0.0; 6];
                dm[k] = -h;
                let rp = reprojection_residual(&cam, &pose.retract(&d), &point, &pixel)
                    .unwrap()
                    .0;
                let rm = reprojection_residual(&cam, &pose.retract(&dm), &point, &pixel)
                    .unwrap()
                    .0;
                let fd = (rp - rm) / (2.0 * h);
                assert!((fd - jp.column(k)).norm() / fd.norm().max(1.0) < 1e-5);
            }
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let rp = reprojection_residual(&cam, &pose, &(point + e), &pixel)
                    .unwrap()
                    .0;
                let rm = reprojection_residual(&cam, &pose, &(point - e), &pixel)
                    .unwrap()
                    .0;
                let fd = (rp - rm) / (2.0 * h);
                assert!((fd - jx.column(k)).norm() / fd.norm().max(1.0) < 1e-5);
            }
        }
    }

    #[test]
    fn prior_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..50 {
            let (p, q) = (rand_pose(&mut rng), rand_pose(&mut rng));
            let (_, j) = pose_prior_residual(&p, &q);
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let mut dm = [0.0; 6];
                dm[k] = -h;
                let fd = (pose_prior_residual(&p.retract(&d), &q).0
                    - pose_prior_residual(&p.retract(&dm), &q).0)
                    / (2.0 * h);
                assert!((fd - j.column(k)).norm() / fd.norm().max(1.0) < 1e-5);
            }
        }
    }
}
