//! Similarity alignment of trajectories.
//!
//! [`umeyama_sim3`] is the closed-form least-squares similarity between two
//! point sets. [`align_predictor_trajectory`] uses it to bring a predictor
//! sub-graph (tiny, scale-normalized translations) onto the VO keyframe
//! trajectory after a pre-scaling by `gamma`, and [`ate_rmse`] implements the
//! absolute trajectory error after 7-DoF, 6-DoF or no alignment.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3, SVD};
use thiserror::Error;

use crate::geometry::{RigidPose, Rotation, SimilarityTransform};

/// Default pre-scaling applied to predictor translations before alignment.
pub const DEFAULT_GAMMA: f64 = 100.0;
/// Default timestamp association gap for ATE, seconds.
pub const DEFAULT_MAX_TIME_GAP: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("underdetermined alignment: {got} correspondences, need at least 3")]
    Underdetermined { got: usize },
    #[error("degenerate point configuration (singular values {singular_values:?})")]
    DegenerateConfiguration { singular_values: [f64; 3] },
    #[error("correspondence mismatch: {0}")]
    Correspondence(String),
    #[error("no trajectory pairs associated within {max_gap} s")]
    EmptyAssociation { max_gap: f64 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("pre-scaling factor must be positive (got {0})")]
    InvalidGamma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub id: u64,
    pub timestamp: f64,
    pub pose: RigidPose,
}

/// Ordered poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    entries: Vec<TrajectoryEntry>,
}

impl TrajectorySegment {
    pub fn new(entries: Vec<TrajectoryEntry>) -> Result<Self, AlignmentError> {
        if entries.is_empty() {
            return Err(AlignmentError::InvalidTrajectory("no entries".into()));
        }
        for w in entries.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(AlignmentError::InvalidTrajectory(format!(
                    "timestamps not strictly increasing ({} then {})",
                    w[0].timestamp, w[1].timestamp
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a segment from `(timestamp, pose)` pairs, numbering ids from 0.
    pub fn from_poses<I>(poses: I) -> Result<Self, AlignmentError>
    where
        I: IntoIterator<Item = (f64, RigidPose)>,
    {
        Self::new(
            poses
                .into_iter()
                .enumerate()
                .map(|(i, (timestamp, pose))| TrajectoryEntry {
                    id: i as u64,
                    timestamp,
                    pose,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn translations(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.pose.translation).collect()
    }

    /// Applies a similarity to every pose.
    pub fn transformed(&self, s: &SimilarityTransform) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| TrajectoryEntry {
                    pose: s.apply_to_pose(&e.pose),
                    ..*e
                })
                .collect(),
        }
    }
}

/// Result of aligning a predictor segment onto the VO trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub transform: SimilarityTransform,
    /// `transform.scale * gamma`: maps raw predictor translations to VO units.
    pub fused_scale: f64,
    pub rms: f64,
}

struct Moments {
    mean_src: Vector3<f64>,
    mean_dst: Vector3<f64>,
    var_src: f64,
    cov: Matrix3<f64>,
    cov_src: Matrix3<f64>,
}

fn moments(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Moments {
    let n = src.len() as f64;
    let mean_src = src.iter().sum::<Vector3<f64>>() / n;
    let mean_dst = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_src = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mean_src;
        let dc = d - mean_dst;
        cov += dc * sc.transpose();
        cov_src += sc * sc.transpose();
        var_src += sc.norm_squared();
    }
    Moments {
        mean_src,
        mean_dst,
        var_src: var_src / n,
        cov: cov / n,
        cov_src: cov_src / n,
    }
}

/// SVD of the cross-covariance with the reflection guard. Returns the
/// rotation and `trace(D S)`.
fn rotation_from_covariance(cov: &Matrix3<f64>) -> (Rotation, f64) {
    let svd = SVD::new(*cov, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let trace_ds = svd.singular_values[0] * s[(0, 0)]
        + svd.singular_values[1] * s[(1, 1)]
        + svd.singular_values[2] * s[(2, 2)];
    (Rotation::from_matrix_unchecked(r), trace_ds)
}

/// Closed-form similarity minimising `sum |dst_k - (s R src_k + t)|^2`.
pub fn umeyama_sim3(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<SimilarityTransform, AlignmentError> {
    if src.len() != dst.len() {
        return Err(AlignmentError::Correspondence(format!(
            "{} source points vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(AlignmentError::Underdetermined { got: src.len() });
    }
    let m = moments(src, dst);
    let sv = m.cov_src.symmetric_eigen().eigenvalues;
    let mut sorted = [sv[0].max(0.0), sv[1].max(0.0), sv[2].max(0.0)];
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Rank < 2 (coincident or collinear) leaves the rotation undetermined.
    if sorted[0] <= f64::MIN_POSITIVE || sorted[1] <= 1e-12 * sorted[0] {
        return Err(AlignmentError::DegenerateConfiguration {
            singular_values: sorted,
        });
    }
    let (rotation, trace_ds) = rotation_from_covariance(&m.cov);
    let scale = trace_ds / m.var_src;
    if !(scale > 0.0) {
        return Err(AlignmentError::DegenerateConfiguration {
            singular_values: sorted,
        });
    }
    let translation = m.mean_dst - rotation.rotate(&m.mean_src) * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Rigid (scale fixed to one) least-squares alignment.
pub(crate) fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> SimilarityTransform {
    let m = moments(src, dst);
    let (rotation, _) = rotation_from_covariance(&m.cov);
    SimilarityTransform {
        scale: 1.0,
        translation: m.mean_dst - rotation.rotate(&m.mean_src),
        rotation,
    }
}

/// Similarity used by ATE: tolerates rank-deficient inputs, which still have
/// a well-defined optimal residual.
fn tolerant_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> SimilarityTransform {
    let m = moments(src, dst);
    if m.var_src <= 1e-300 {
        return SimilarityTransform {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: m.mean_dst - m.mean_src,
        };
    }
    let (rotation, trace_ds) = rotation_from_covariance(&m.cov);
    let scale = (trace_ds / m.var_src).max(0.0);
    SimilarityTransform {
        scale,
        translation: m.mean_dst - rotation.rotate(&m.mean_src) * scale,
        rotation,
    }
}

fn rms_residual(s: &SimilarityTransform, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(a, b)| (b - s.apply(a)).norm_squared())
        .sum();
    (sum / src.len() as f64).sqrt()
}

/// Aligns `gamma`-prescaled predictor translations onto VO translations,
/// matching entries by keyframe id.
pub fn align_predictor_trajectory(
    vo: &TrajectorySegment,
    pred: &TrajectorySegment,
    gamma: f64,
) -> Result<AlignmentResult, AlignmentError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(AlignmentError::InvalidGamma(gamma));
    }
    let vo_by_id: BTreeMap<u64, &TrajectoryEntry> = vo.entries.iter().map(|e| (e.id, e)).collect();
    if vo_by_id.len() != pred.len() {
        return Err(AlignmentError::Correspondence(format!(
            "VO segment has {} keyframes, predictor segment has {}",
            vo_by_id.len(),
            pred.len()
        )));
    }
    let mut src = Vec::with_capacity(pred.len());
    let mut dst = Vec::with_capacity(pred.len());
    for e in &pred.entries {
        let v = vo_by_id.get(&e.id).ok_or_else(|| {
            AlignmentError::Correspondence(format!("keyframe {} missing from VO segment", e.id))
        })?;
        src.push(e.pose.translation * gamma);
        dst.push(v.pose.translation);
    }
    let transform = umeyama_sim3(&src, &dst)?;
    Ok(AlignmentResult {
        transform,
        fused_scale: transform.scale * gamma,
        rms: rms_residual(&transform, &src, &dst),
    })
}

/// Trajectory alignment used before computing ATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// Similarity (scale, rotation, translation).
    Sim3,
    /// Rigid, scale fixed to one.
    Se3,
    /// Raw poses.
    None,
}

impl std::str::FromStr for AlignMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "7dof" | "sim3" => Ok(Self::Sim3),
            "6dof" | "se3" => Ok(Self::Se3),
            "none" => Ok(Self::None),
            other => Err(format!(
                "unknown alignment mode '{other}' (expected 7dof, 6dof or none)"
            )),
        }
    }
}

/// Pairs each estimate entry with the nearest ground-truth timestamp within
/// `max_gap`. Returns `(estimate, ground_truth)` translation pairs.
pub fn associate(
    estimate: &TrajectorySegment,
    ground_truth: &TrajectorySegment,
    max_gap: f64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let gt = ground_truth.entries();
    let mut est_pts = Vec::new();
    let mut gt_pts = Vec::new();
    for e in estimate.entries() {
        let idx = gt.partition_point(|g| g.timestamp < e.timestamp);
        let mut best: Option<(f64, usize)> = None;
        for j in [idx.wrapping_sub(1), idx] {
            if let Some(g) = gt.get(j) {
                let d = (g.timestamp - e.timestamp).abs();
                if d <= max_gap && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        if let Some((_, j)) = best {
            est_pts.push(e.pose.translation);
            gt_pts.push(gt[j].pose.translation);
        }
    }
    (est_pts, gt_pts)
}

/// Absolute trajectory error (translation RMSE) after the chosen alignment.
pub fn ate_rmse(
    estimate: &TrajectorySegment,
    ground_truth: &TrajectorySegment,
    mode: AlignMode,
    max_gap: f64,
) -> Result<f64, AlignmentError> {
    let (est, gt) = associate(estimate, ground_truth, max_gap);
    if est.is_empty() {
        return Err(AlignmentError::EmptyAssociation { max_gap });
    }
    let s = match mode {
        AlignMode::Sim3 => tolerant_sim3(&est, &gt),
        AlignMode::Se3 => kabsch(&est, &gt),
        AlignMode::None => SimilarityTransform::identity(),
    };
    Ok(rms_residual(&s, &est, &gt))
}

/// Relative scale between two predicted point clouds of the same keyframe,
/// matched by landmark id: the similarity scale taking `moving` onto
/// `reference`.
pub fn cloud_scale_ratio(
    reference: &[(u32, Vector3<f64>)],
    moving: &[(u32, Vector3<f64>)],
) -> Result<f64, AlignmentError> {
    let reference: BTreeMap<u32, Vector3<f64>> = reference.iter().copied().collect();
    let (src, dst): (Vec<_>, Vec<_>) = moving
        .iter()
        .filter_map(|(id, p)| reference.get(id).map(|q| (*p, *q)))
        .unzip();
    Ok(umeyama_sim3(&src, &dst)?.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect()
    }

    fn random_sim3(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        SimilarityTransform {
            scale: rng.random_range(0.05..20.0),
            rotation: so3_exp(&Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )),
            translation: Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ),
        }
    }

    fn segment(points: &[Vector3<f64>]) -> TrajectorySegment {
        TrajectorySegment::from_poses(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| (i as f64 * 0.1, RigidPose::from_translation(*p))),
        )
        .unwrap()
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 8);
        let s = umeyama_sim3(&pts, &pts).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(s.rotation.angle() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_constructed_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let gt = random_sim3(&mut rng);
            let src = random_points(&mut rng, 10);
            let dst: Vec<_> = src.iter().map(|p| gt.apply(p)).collect();
            let s = umeyama_sim3(&src, &dst).unwrap();
            assert!((s.scale - gt.scale).abs() / gt.scale < 1e-9);
            assert!((s.rotation.transpose() * gt.rotation).angle() < 1e-9);
            assert!((s.translation - gt.translation).norm() < 1e-9 * (1.0 + gt.translation.norm()));
        }
    }

    #[test]
    fn degenerate_inputs() {
        let collinear = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(2.0, 2.0, 2.0),
        ];
        assert!(matches!(
            umeyama_sim3(&collinear, &collinear),
            Err(AlignmentError::DegenerateConfiguration { .. })
        ));
        let coincident = vec![Vector3::new(1.0, 2.0, 3.0); 4];
        assert!(matches!(
            umeyama_sim3(&coincident, &coincident),
            Err(AlignmentError::DegenerateConfiguration { .. })
        ));
        assert!(matches!(
            umeyama_sim3(&collinear[..2], &collinear[..2]),
            Err(AlignmentError::Underdetermined { got: 2 })
        ));
    }

    #[test]
    fn optimality_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = random_sim3(&mut rng);
            let src = random_points(&mut rng, 12);
            let dst: Vec<_> = src
                .iter()
                .map(|p| {
                    gt.apply(p)
                        + Vector3::new(
                            rng.random_range(-0.3..0.3),
                            rng.random_range(-0.3..0.3),
                            rng.random_range(-0.3..0.3),
                        )
                })
                .collect();
            let s = umeyama_sim3(&src, &dst).unwrap();
            let cost = |t: &SimilarityTransform| -> f64 {
                src.iter()
                    .zip(&dst)
                    .map(|(a, b)| (b - t.apply(a)).norm_squared())
                    .sum()
            };
            let base = cost(&s);
            for ds in [-1e-3, 1e-3] {
                let mut p = s;
                p.scale += ds;
                assert!(cost(&p) >= base);
            }
            for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
                for sign in [-1.0, 1.0] {
                    let mut p = s;
                    p.rotation = s.rotation * so3_exp(&(axis * 1e-3 * sign));
                    assert!(cost(&p) >= base);
                }
            }
        }
    }

    #[test]
    fn prescaled_predictor_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vo_pts = random_points(&mut rng, 10);
        let pred_pts: Vec<_> = vo_pts.iter().map(|p| p / 100.0).collect();
        let r = align_predictor_trajectory(&segment(&vo_pts), &segment(&pred_pts), 100.0).unwrap();
        assert!((r.transform.scale - 1.0).abs() < 1e-9);
        assert!((r.fused_scale - 100.0).abs() < 1e-7);
        assert!(r.rms < 1e-9);

        let same = align_predictor_trajectory(&segment(&vo_pts), &segment(&vo_pts), 1.0).unwrap();
        assert!((same.transform.scale - 1.0).abs() < 1e-12 && same.rms < 1e-12);
    }

    #[test]
    fn circle_alignment_scaled_and_rotated() {
        let vo: Vec<_> = (0..10)
            .map(|i| {
                let a = i as f64 * 0.5;
                Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.2 * a)
            })
            .collect();
        let rot = so3_exp(&Vector3::new(0.0, 0.0, 30f64.to_radians()));
        let pred: Vec<_> = vo.iter().map(|p| rot.rotate(p) * 0.37).collect();
        for gamma in [1.0, 100.0] {
            let r = align_predictor_trajectory(&segment(&vo), &segment(&pred), gamma).unwrap();
            assert!(
                (r.fused_scale * 0.37 - 1.0).abs() < 1e-9,
                "gamma {gamma}: {}",
                r.fused_scale
            );
        }
    }

    #[test]
    fn gamma_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vo = random_points(&mut rng, 10);
        let gt = random_sim3(&mut rng);
        let pred: Vec<_> = vo.iter().map(|p| gt.apply(p) * 1e-3).collect();
        let base = align_predictor_trajectory(&segment(&vo), &segment(&pred), 1.0)
            .unwrap()
            .fused_scale;
        for gamma in [1.0, 10.0, 100.0, 1e3, 1e4] {
            let sf = align_predictor_trajectory(&segment(&vo), &segment(&pred), gamma)
                .unwrap()
                .fused_scale;
            assert!((sf - base).abs() / base < 1e-9);
        }
    }

    #[test]
    fn alignment_id_mismatch() {
        let pts: Vec<_> = (0..4)
            .map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        let vo = segment(&pts);
        let mut entries = segment(&pts).entries().to_vec();
        entries[2].id = 99;
        let pred = TrajectorySegment::new(entries).unwrap();
        assert!(matches!(
            align_predictor_trajectory(&vo, &pred, 1.0),
            Err(AlignmentError::Correspondence(_))
        ));
    }

    #[test]
    fn ate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt_pts = random_points(&mut rng, 20);
        let gt = segment(&gt_pts);
        assert!(ate_rmse(&gt, &gt, AlignMode::Sim3, DEFAULT_MAX_TIME_GAP).unwrap() < 1e-12);
        let scaled: Vec<_> = gt_pts.iter().map(|p| p * 2.0).collect();
        assert!(
            ate_rmse(
                &segment(&scaled),
                &gt,
                AlignMode::Sim3,
                DEFAULT_MAX_TIME_GAP
            )
            .unwrap()
                < 1e-9
        );
        let shifted: Vec<_> = gt_pts.iter().map(|p| p + Vector3::x()).collect();
        let none = ate_rmse(
            &segment(&shifted),
            &gt,
            AlignMode::None,
            DEFAULT_MAX_TIME_GAP,
        )
        .unwrap();
        assert!((none - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ate_empty_association() {
        let a = TrajectorySegment::from_poses([(0.0, RigidPose::identity())]).unwrap();
        let b = TrajectorySegment::from_poses([(1.0, RigidPose::identity())]).unwrap();
        assert!(matches!(
            ate_rmse(&a, &b, AlignMode::Sim3, DEFAULT_MAX_TIME_GAP),
            Err(AlignmentError::EmptyAssociation { .. })
        ));
    }

    #[test]
    fn ate_mode_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let gt_pts = random_points(&mut rng, 15);
            let s = random_sim3(&mut rng);
            let est: Vec<_> = gt_pts
                .iter()
                .map(|p| {
                    s.apply(p)
                        + Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            0.0,
                        )
                })
                .collect();
            let (e, g) = (segment(&est), segment(&gt_pts));
            let a7 = ate_rmse(&e, &g, AlignMode::Sim3, 0.02).unwrap();
            let a6 = ate_rmse(&e, &g, AlignMode::Se3, 0.02).unwrap();
            let a0 = ate_rmse(&e, &g, AlignMode::None, 0.02).unwrap();
            assert!(a7 <= a6 + 1e-12 && a6 <= a0 + 1e-12, "{a7} {a6} {a0}");
        }
    }

    #[test]
    fn ate_timestamp_gap() {
        let gt = TrajectorySegment::from_poses([
            (0.0, RigidPose::identity()),
            (1.0, RigidPose::identity()),
        ])
        .unwrap();
        let est = TrajectorySegment::from_poses([
            (0.015, RigidPose::from_translation(Vector3::x())),
            (0.5, RigidPose::from_translation(Vector3::y() * 100.0)),
        ])
        .unwrap();
        // Only the first entry associates.
        let e = ate_rmse(&est, &gt, AlignMode::None, 0.02).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cloud_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 30);
        let a: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, *p))
            .collect();
        let b: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, p * 0.5))
            .collect();
        assert!((cloud_scale_ratio(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }
}
