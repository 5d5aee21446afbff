//! Fundamental-matrix RANSAC between consecutive frames and essential-matrix
//! decomposition for two-view initialisation.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FrontendError, CHI2_1DOF_95};
use crate::geometry::{triangulate, CameraIntrinsics, RigidPose, Rotation};

/// A pixel correspondence between two frames with the larger of the two
/// adaptive noise scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarMatch {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub confidence: f64,
    pub max_iterations: usize,
    /// Chi-square gate on the whitened residual.
    pub chi2: f64,
    pub seed: u64,
}

impl RansacParams {
    pub fn epipolar(seed: u64) -> Self {
        Self {
            confidence: 0.99,
            max_iterations: 500,
            chi2: CHI2_1DOF_95,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl<M> RansacOutcome<M> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Iterations needed to draw one all-inlier sample of size `m` with the given
/// confidence when a fraction `w` of the data are inliers.
pub fn ransac_iterations(confidence: f64, w: f64, m: usize, cap: usize) -> usize {
    let good = w.powi(m as i32);
    if good >= 1.0 - 1e-12 {
        return 1;
    }
    if good <= 1e-12 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil();
    if n.is_finite() {
        (n.max(1.0) as usize).min(cap)
    } else {
        cap
    }
}

/// Similarity normalising points to zero mean and mean distance sqrt(2).
fn normalizer(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector2<f64>>() / n;
    let d = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if d > 1e-12 {
        std::f64::consts::SQRT_2 / d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Normalised eight-point estimate with the rank-2 constraint enforced.
/// `b^T F a = 0` for every correspondence.
pub fn estimate_fundamental(matches: &[EpipolarMatch]) -> Option<Matrix3<f64>> {
    if matches.len() < 8 {
        return None;
    }
    let pa: Vec<_> = matches.iter().map(|m| m.a).collect();
    let pb: Vec<_> = matches.iter().map(|m| m.b).collect();
    let ta = normalizer(&pa);
    let tb = normalizer(&pb);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in pa.iter().zip(&pb) {
        let x = ta * Vector3::new(a.x, a.y, 1.0);
        let y = tb * Vector3::new(b.x, b.y, 1.0);
        let row = SMatrix::<f64, 1, 9>::from_row_slice(&[
            y.x * x.x,
            y.x * x.y,
            y.x,
            y.y * x.x,
            y.y * x.y,
            y.y,
            x.x,
            x.y,
            1.0,
        ]);
        ata += row.transpose() * row;
    }
    let eig = ata.symmetric_eigen();
    let f = eig.eigenvectors.column(eig.eigenvalues.imin());
    let fmat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let svd = fmat.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    s[2] = 0.0;
    let f2 = u * Matrix3::from_diagonal(&s) * vt;
    let out = tb.transpose() * f2 * ta;
    let norm = out.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(out / norm)
}

/// First-order geometric (Sampson) error, squared, in pixels.
pub fn sampson_sq(f: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let x = Vector3::new(a.x, a.y, 1.0);
    let y = Vector3::new(b.x, b.y, 1.0);
    let fx = f * x;
    let fty = f.transpose() * y;
    let e = y.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + fty.x * fty.x + fty.y * fty.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    e * e / den
}

/// Inlier mask and truncated-quadratic (MSAC) score of a hypothesis.
fn classify(f: &Matrix3<f64>, matches: &[EpipolarMatch], chi2: f64) -> (Vec<bool>, f64) {
    let mut score = 0.0;
    let mask = matches
        .iter()
        .map(|m| {
            let e = sampson_sq(f, &m.a, &m.b) / (m.sigma * m.sigma);
            score += e.min(chi2);
            e < chi2
        })
        .collect();
    (mask, score)
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|b| **b).count()
}

/// Fundamental-matrix RANSAC. A match is an inlier when its squared Sampson
/// error is below `chi2 * sigma^2`. Hypotheses are ranked by the truncated
/// quadratic (MSAC) loss rather than the raw inlier count, so a hypothesis
/// that fits the true inliers exactly beats one that merely keeps them under
/// the gate while admitting extra outliers.
pub fn epipolar_ransac(
    matches: &[EpipolarMatch],
    params: &RansacParams,
) -> Result<RansacOutcome<Matrix3<f64>>, FrontendError> {
    if matches.len() < 8 {
        return Err(FrontendError::InsufficientData {
            got: matches.len(),
            need: 8,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize, f64)> = None;
    let mut needed = params.max_iterations.max(1);
    let mut iterations = 0;
    while iterations < needed {
        iterations += 1;
        let idx = sample(&mut rng, matches.len(), 8);
        let subset: Vec<_> = idx.iter().map(|i| matches[i]).collect();
        let Some(f) = estimate_fundamental(&subset) else {
            continue;
        };
        let (mask, score) = classify(&f, matches, params.chi2);
        let c = count(&mask);
        if best.as_ref().is_none_or(|b| score < b.3) {
            needed = ransac_iterations(
                params.confidence,
                c as f64 / matches.len() as f64,
                8,
                params.max_iterations,
            )
            .max(iterations);
            best = Some((f, mask, c, score));
        }
    }
    let best_inliers = best.as_ref().map_or(0, |b| b.2);
    let Some((mut f, mut mask, _, mut score)) = best.filter(|b| b.2 >= 8) else {
        return Err(FrontendError::ConsensusFailure {
            inliers: best_inliers,
            need: 8,
        });
    };
    // Local optimisation: least-squares refits over the matches well inside
    // the gate, kept while they lower the MSAC loss.
    for _ in 0..4 {
        let inl: Vec<_> = matches
            .iter()
            .filter(|m| sampson_sq(&f, &m.a, &m.b) < 0.25 * params.chi2 * m.sigma * m.sigma)
            .copied()
            .collect();
        let Some(refit) = estimate_fundamental(&inl) else {
            break;
        };
        let (m2, s2) = classify(&refit, matches, params.chi2);
        if !(s2 < score) || count(&m2) < 8 {
            break;
        }
        (f, mask, score) = (refit, m2, s2);
    }
    Ok(RansacOutcome {
        model: f,
        inliers: mask,
        iterations,
    })
}

/// Relative pose of the second camera, `X_b = R X_a + t` with unit `t`,
/// chosen among the four essential-matrix decompositions by cheirality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoViewPose {
    pub b_from_a: RigidPose,
    /// Correspondences triangulated in front of both cameras.
    pub in_front: usize,
}

pub fn essential_from_fundamental(f: &Matrix3<f64>, k: &CameraIntrinsics) -> Matrix3<f64> {
    let km = k.matrix();
    km.transpose() * f * km
}

pub fn decompose_essential(
    e: &Matrix3<f64>,
    k: &CameraIntrinsics,
    matches: &[EpipolarMatch],
) -> Result<TwoViewPose, FrontendError> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut vt)) = (svd.u, svd.v_t) else {
        return Err(FrontendError::ConsensusFailure {
            inliers: 0,
            need: 8,
        });
    };
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let candidates = [
        (u * w * vt, t),
        (u * w * vt, -t),
        (u * w.transpose() * vt, t),
        (u * w.transpose() * vt, -t),
    ];
    let mut best: Option<TwoViewPose> = None;
    for (r, t) in candidates {
        let b_from_a = RigidPose::new(Rotation::from_matrix_projected(&r), t);
        let pose_b = b_from_a.inverse();
        let in_front = matches
            .iter()
            .filter(|m| triangulate(&RigidPose::identity(), &pose_b, k, &m.a, &m.b, 0.0).is_ok())
            .count();
        if best.is_none_or(|b| in_front > b.in_front) {
            best = Some(TwoViewPose { b_from_a, in_front });
        }
    }
    best.filter(|b| b.in_front > 0)
        .ok_or(FrontendError::ConsensusFailure {
            inliers: 0,
            need: 1,
        })
}

/// Dense design matrix helper used by tests to check the epipolar constraint.
#[doc(hidden)]
pub fn epipolar_residuals(f: &Matrix3<f64>, matches: &[EpipolarMatch]) -> DMatrix<f64> {
    DMatrix::from_iterator(
        matches.len(),
        1,
        matches
            .iter()
            .map(|m| Vector3::new(m.b.x, m.b.y, 1.0).dot(&(f * Vector3::new(m.a.x, m.a.y, 1.0)))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp};
    use rand::Rng;

    fn rigid_matches(
        rng: &mut ChaCha8Rng,
        n: usize,
        noise: f64,
    ) -> (Vec<EpipolarMatch>, RigidPose) {
        let k = CameraIntrinsics::default();
        let pose_b = RigidPose::new(
            so3_exp(&Vector3::new(0.02, -0.05, 0.01)),
            Vector3::new(0.4, 0.05, 0.1),
        );
        let mut out = Vec::new();
        while out.len() < n {
            let p = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(4.0..10.0),
            );
            let (Ok(a), Ok(b)) = (
                project(&k, &RigidPose::identity(), &p),
                project(&k, &pose_b.inverse(), &p),
            ) else {
                continue;
            };
            if !k.contains(&a) || !k.contains(&b) {
                continue;
            }
            let jitter = |rng: &mut ChaCha8Rng| {
                Vector2::new(
                    rng.random_range(-noise..=noise),
                    rng.random_range(-noise..=noise),
                )
            };
            out.push(EpipolarMatch {
                a: a + jitter(rng),
                b: b + jitter(rng),
                sigma: 1.0,
            });
        }
        (out, pose_b)
    }

    #[test]
    fn noiseless_matches_are_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, _) = rigid_matches(&mut rng, 50, 0.0);
        let out = epipolar_ransac(&m, &RansacParams::epipolar(3)).unwrap();
        assert_eq!(out.inlier_count(), 50);
        assert!(epipolar_residuals(&out.model, &m).amax() < 1e-6);
    }

    #[test]
    fn too_few_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, _) = rigid_matches(&mut rng, 7, 0.0);
        assert!(matches!(
            epipolar_ransac(&m, &RansacParams::epipolar(0)),
            Err(FrontendError::InsufficientData { got: 7, need: 8 })
        ));
    }

    #[test]
    fn planted_outliers_are_rejected() {
        // Per-outlier rejection rate over many seeds. Inliers are noiseless,
        // so the gate is set for a quarter-pixel noise level; a random match
        // can still land inside the gate by coincidence.
        let k = CameraIntrinsics::default();
        let mut rejected = 0;
        let mut planted = 0;
        let mut inliers_kept = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut m, _) = rigid_matches(&mut rng, 40, 0.0);
            for mm in &mut m {
                mm.sigma = 0.25;
            }
            for _ in 0..10 {
                m.push(EpipolarMatch {
                    a: Vector2::new(
                        rng.random_range(0.0..k.width),
                        rng.random_range(0.0..k.height),
                    ),
                    b: Vector2::new(
                        rng.random_range(0.0..k.width),
                        rng.random_range(0.0..k.height),
                    ),
                    sigma: 0.25,
                });
            }
            let out = epipolar_ransac(&m, &RansacParams::epipolar(seed)).unwrap();
            inliers_kept += out.inliers[..40].iter().filter(|b| **b).count();
            rejected += out.inliers[40..].iter().filter(|b| !**b).count();
            planted += 10;
        }
        let rate = rejected as f64 / planted as f64;
        assert!(rate >= 0.99, "rejection rate {rate}");
        assert_eq!(inliers_kept, 8000);
    }

    #[test]
    fn essential_decomposition_recovers_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, pose_b) = rigid_matches(&mut rng, 60, 0.0);
        let k = CameraIntrinsics::default();
        let f = estimate_fundamental(&m).unwrap();
        let e = essential_from_fundamental(&f, &k);
        let two = decompose_essential(&e, &k, &m).unwrap();
        assert_eq!(two.in_front, 60);
        let truth = pose_b.inverse();
        let dr = two
            .b_from_a
            .rotation
            .compose(&truth.rotation.inverse())
            .angle();
        assert!(dr < 1e-6, "{dr}");
        let dir = truth.translation.normalize();
        assert!((two.b_from_a.translation.normalize() - dir).norm() < 1e-6);
    }

    #[test]
    fn iteration_formula() {
        assert_eq!(ransac_iterations(0.99, 1.0, 8, 500), 1);
        assert_eq!(ransac_iterations(0.99, 0.0, 8, 500), 500);
        // log(0.01) / log(1 - 0.5^3) = 34.5
        assert_eq!(ransac_iterations(0.99, 0.5, 3, 500), 35);
    }
}
