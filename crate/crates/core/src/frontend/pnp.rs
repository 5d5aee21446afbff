//! Absolute pose from 2D-3D correspondences: minimal P3P inside RANSAC, then
//! robust nonlinear refinement with points held fixed.

use nalgebra::{Matrix4, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::epipolar::{ransac_iterations, RansacOutcome, RansacParams};
use super::FrontendError;
use crate::alignment::kabsch;
use crate::backend::ba::CHI2_2DOF_95;
use crate::backend::solver::{
    solve_nonlinear, Factor, FactorKind, FactorProblem, ReprojectionFactor, SolveReport,
    SolverOptions,
};
use crate::geometry::{project, CameraIntrinsics, RigidPose};
use crate::uncertainty::Observation;

/// A map point and its observation in the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpCorrespondence {
    pub point: Vector3<f64>,
    pub obs: Observation,
}

impl RansacParams {
    pub fn pnp(seed: u64) -> Self {
        Self {
            confidence: 0.99,
            max_iterations: 500,
            chi2: CHI2_2DOF_95,
            seed,
        }
    }
}

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`, found as
/// companion-matrix eigenvalues and polished with Newton steps.
fn quartic_real_roots(c: [f64; 5]) -> Vec<f64> {
    if c[0].abs() < 1e-14 * c.iter().map(|v| v.abs()).fold(0.0, f64::max) {
        return Vec::new();
    }
    let a = [c[1] / c[0], c[2] / c[0], c[3] / c[0], c[4] / c[0]];
    let companion = Matrix4::new(
        -a[0], -a[1], -a[2], -a[3], 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
    );
    let eval = |x: f64| (((x + a[0]) * x + a[1]) * x + a[2]) * x + a[3];
    let deriv = |x: f64| ((4.0 * x + 3.0 * a[0]) * x + 2.0 * a[1]) * x + a[2];
    let mut roots = Vec::new();
    for z in companion.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let d = deriv(x);
            if d.abs() < 1e-300 {
                break;
            }
            let step = eval(x) / d;
            x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if eval(x).abs() < 1e-6 * (1.0 + x.abs().powi(4))
            && !roots.iter().any(|r: &f64| (r - x).abs() < 1e-10)
        {
            roots.push(x);
        }
    }
    roots
}

/// Grunert's P3P in the formulation of Haralick et al.: up to four
/// world-from-camera poses consistent with three unit bearing vectors.
pub fn solve_p3p(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<RigidPose> {
    let j: Vec<Vector3<f64>> = bearings.iter().map(|b| b.normalize()).collect();
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = j[1].dot(&j[2]);
    let cb = j[0].dot(&j[2]);
    let cg = j[0].dot(&j[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];

    let mut out = Vec::new();
    for v in quartic_real_roots(coeffs) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        if !(s1 > 0.0 && s2 > 0.0 && s3 > 0.0) {
            continue;
        }
        let cam = [j[0] * s1, j[1] * s2, j[2] * s3];
        // Camera-from-world rigid fit, then invert.
        let fit = kabsch(points, &cam);
        let c_from_w = RigidPose::new(fit.rotation, fit.translation);
        let pose = c_from_w.inverse();
        if pose.is_finite() {
            out.push(pose);
        }
    }
    out
}

fn reprojection_sq(camera: &CameraIntrinsics, pose: &RigidPose, c: &PnpCorrespondence) -> f64 {
    match project(camera, &pose.inverse(), &c.point) {
        Ok(px) => (px - c.obs.pixel).norm_squared(),
        Err(_) => f64::INFINITY,
    }
}

/// Inlier mask and truncated-quadratic (MSAC) score of a hypothesis.
fn classify(
    camera: &CameraIntrinsics,
    pose: &RigidPose,
    corr: &[PnpCorrespondence],
    chi2: f64,
) -> (Vec<bool>, f64) {
    let mut score = 0.0;
    let mask = corr
        .iter()
        .map(|c| {
            let e = reprojection_sq(camera, pose, c) / (c.obs.sigma * c.obs.sigma);
            score += e.min(chi2);
            e < chi2
        })
        .collect();
    (mask, score)
}

/// P3P-RANSAC. Each hypothesis is disambiguated with a fourth sampled point;
/// a correspondence is an inlier when its squared reprojection error is below
/// `chi2 * sigma^2`. Hypotheses are ranked by inlier count, ties broken by the
/// truncated quadratic (MSAC) loss. Returns a world-from-camera pose.
pub fn p3p_ransac(
    corr: &[PnpCorrespondence],
    camera: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacOutcome<RigidPose>, FrontendError> {
    if corr.len() < 4 {
        return Err(FrontendError::InsufficientData {
            got: corr.len(),
            need: 4,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(RigidPose, Vec<bool>, usize, f64)> = None;
    let mut needed = params.max_iterations.max(1);
    let mut iterations = 0;
    while iterations < needed {
        iterations += 1;
        let idx = sample(&mut rng, corr.len(), 4);
        let pick: Vec<&PnpCorrespondence> = idx.iter().map(|i| &corr[i]).collect();
        let points = [pick[0].point, pick[1].point, pick[2].point];
        if (points[1] - points[0])
            .cross(&(points[2] - points[0]))
            .norm()
            < 1e-9
        {
            continue;
        }
        let bearings = [0, 1, 2].map(|k| camera.unproject(&pick[k].obs.pixel));
        let Some(pose) = solve_p3p(&bearings, &points)
            .into_iter()
            .map(|p| (reprojection_sq(camera, &p, pick[3]), p))
            .filter(|(e, _)| e.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
        else {
            continue;
        };
        let (mask, score) = classify(camera, &pose, corr, params.chi2);
        let count = mask.iter().filter(|b| **b).count();
        if best
            .as_ref()
            .is_none_or(|b| count > b.2 || (count == b.2 && score < b.3))
        {
            needed = ransac_iterations(
                params.confidence,
                count as f64 / corr.len() as f64,
                4,
                params.max_iterations,
            )
            .max(iterations);
            best = Some((pose, mask, count, score));
        }
    }
    match best {
        Some((pose, inliers, count, _)) if count >= 4 => Ok(RansacOutcome {
            model: pose,
            inliers,
            iterations,
        }),
        other => Err(FrontendError::ConsensusFailure {
            inliers: other.map_or(0, |b| b.2),
            need: 4,
        }),
    }
}

/// Refines a world-from-camera pose against fixed map points, with a Huber
/// kernel of the given threshold on the whitened reprojection error.
pub fn refine_pose_pnp(
    initial: &RigidPose,
    inliers: &[PnpCorrespondence],
    camera: &CameraIntrinsics,
    huber_delta: Option<f64>,
) -> Result<(RigidPose, SolveReport), FrontendError> {
    if inliers.len() < 4 {
        return Err(FrontendError::InsufficientData {
            got: inliers.len(),
            need: 4,
        });
    }
    let mut problem = FactorProblem::new();
    let pose = problem.add_pose(*initial, false);
    for c in inliers {
        let point = problem.add_point(c.point, true);
        problem.add_factor(Factor {
            kind: FactorKind::Reprojection(ReprojectionFactor {
                pose,
                point,
                pixel: c.obs.pixel,
                sigma: c.obs.sigma,
                camera: *camera,
            }),
            huber: huber_delta,
        })?;
    }
    let options = SolverOptions {
        max_iterations: 30,
        relative_decrease_tol: 1e-14,
        step_tol: 1e-12,
        ..SolverOptions::default()
    };
    let report = solve_nonlinear(&mut problem, &options)?;
    let refined = problem.pose(pose);
    if !refined.is_finite() || !report.final_cost.is_finite() {
        return Err(FrontendError::RefinementFailure("non-finite pose".into()));
    }
    let evaluable = inliers
        .iter()
        .filter(|c| reprojection_sq(camera, &refined, c).is_finite())
        .count();
    if evaluable < 4 {
        return Err(FrontendError::RefinementFailure(format!(
            "only {evaluable} points remain in front of the camera"
        )));
    }
    Ok((refined, report))
}
