//! Local bundle adjustment over a covisibility window.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::map::{KeyframeId, Map, MapPointId};
use super::solver::{
    solve_nonlinear, Factor, FactorKind, FactorProblem, ReprojectionFactor, SolveReport,
    SolverOptions, VarId,
};
use super::BackendError;
use crate::geometry::{CameraIntrinsics, RigidPose};

/// 95% quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaConfig {
    /// Minimum shared points for a neighbour to join the active window.
    pub covis_threshold: u32,
    pub chi2_threshold: f64,
    /// Huber threshold on the whitened residual norm for the first stage.
    pub huber_delta: f64,
    pub max_iters: usize,
    /// Fewest fixed keyframes kept for gauge; oldest active ones are frozen to
    /// reach it.
    pub min_fixed: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            covis_threshold: 15,
            chi2_threshold: CHI2_2DOF_95,
            huber_delta: CHI2_2DOF_95.sqrt(),
            max_iters: 20,
            min_fixed: 2,
        }
    }
}

impl BaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.chi2_threshold > 0.0) || !(self.huber_delta > 0.0) {
            return Err("chi2_threshold and huber_delta must be positive".into());
        }
        if self.max_iters == 0 {
            return Err("max_iters must be at least 1".into());
        }
        Ok(())
    }
}

/// Keyframes refined by local BA and those held fixed around them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalWindow {
    pub active: BTreeSet<KeyframeId>,
    pub fixed: BTreeSet<KeyframeId>,
}

/// The current keyframe plus its neighbours sharing at least `threshold`
/// points are active; keyframes that observe an active map point but are not
/// active themselves are fixed.
pub fn covisible_window(map: &Map, current: KeyframeId, threshold: u32) -> LocalWindow {
    let mut window = LocalWindow::default();
    if !map.keyframes.contains_key(&current) {
        return window;
    }
    window.active.insert(current);
    for (kf, w) in map.covisibility.neighbors(current) {
        if w > 0 && w >= threshold {
            window.active.insert(kf);
        }
    }
    for kf in &window.active {
        for pid in map.keyframes[kf].observations.keys() {
            for obs in &map.points[pid].observers {
                if !window.active.contains(obs) {
                    window.fixed.insert(*obs);
                }
            }
        }
    }
    window
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub window: LocalWindow,
    /// Active keyframes frozen to keep the gauge fixed.
    pub frozen: BTreeSet<KeyframeId>,
    pub observations: usize,
    pub rejected: Vec<(KeyframeId, MapPointId)>,
    pub culled: Vec<MapPointId>,
    /// Window poses after the robust stage, before gating.
    pub stage1_poses: BTreeMap<KeyframeId, RigidPose>,
    pub stage1: SolveReport,
    pub stage2: SolveReport,
}

impl BaReport {
    pub fn rejection_rate(&self) -> f64 {
        if self.observations == 0 {
            0.0
        } else {
            self.rejected.len() as f64 / self.observations as f64
        }
    }
}

struct Built {
    problem: FactorProblem,
    poses: BTreeMap<KeyframeId, VarId>,
    points: BTreeMap<MapPointId, VarId>,
    /// `(keyframe, point)` for every factor, in factor order.
    edges: Vec<(KeyframeId, MapPointId)>,
}

fn build(
    map: &Map,
    camera: &CameraIntrinsics,
    free_kfs: &BTreeSet<KeyframeId>,
    fixed_kfs: &BTreeSet<KeyframeId>,
    candidate_points: &BTreeSet<MapPointId>,
    excluded: &BTreeSet<(KeyframeId, MapPointId)>,
    huber: Option<f64>,
) -> Result<Built, BackendError> {
    let mut problem = FactorProblem::new();
    let mut poses = BTreeMap::new();
    for kf in free_kfs.iter().chain(fixed_kfs) {
        let fixed = !free_kfs.contains(kf);
        poses.insert(*kf, problem.add_pose(map.keyframes[kf].pose, fixed));
    }
    let mut points = BTreeMap::new();
    let mut edges = Vec::new();
    for pid in candidate_points {
        let mp = &map.points[pid];
        let obs: Vec<KeyframeId> = mp
            .observers
            .iter()
            .copied()
            .filter(|kf| poses.contains_key(kf) && !excluded.contains(&(*kf, *pid)))
            .collect();
        if obs.len() < 2 {
            continue;
        }
        let var = problem.add_point(mp.position, false);
        points.insert(*pid, var);
        for kf in obs {
            let o = map.keyframes[&kf].observations[pid];
            problem.add_factor(Factor {
                kind: FactorKind::Reprojection(ReprojectionFactor {
                    pose: poses[&kf],
                    point: var,
                    pixel: o.pixel,
                    sigma: o.sigma,
                    camera: *camera,
                }),
                huber,
            })?;
            edges.push((kf, *pid));
        }
    }
    Ok(Built {
        problem,
        poses,
        points,
        edges,
    })
}

/// Two-stage local BA: a Huber-robustified solve, a chi-square gate that
/// removes outlying observations, then a plain least-squares solve on the
/// survivors. Map changes are applied only when both stages succeed.
pub fn local_ba(
    map: &mut Map,
    window: &LocalWindow,
    camera: &CameraIntrinsics,
    config: &BaConfig,
) -> Result<BaReport, BackendError> {
    if window.active.is_empty() {
        return Err(BackendError::EmptyWindow);
    }
    let mut free: BTreeSet<KeyframeId> = window.active.clone();
    let mut fixed: BTreeSet<KeyframeId> = window.fixed.clone();
    let mut frozen = BTreeSet::new();
    while fixed.len() < config.min_fixed && !free.is_empty() {
        let oldest = *free.iter().next().expect("non-empty");
        free.remove(&oldest);
        fixed.insert(oldest);
        frozen.insert(oldest);
    }
    let candidate_points: BTreeSet<MapPointId> = window
        .active
        .iter()
        .flat_map(|kf| map.keyframes[kf].observations.keys().copied())
        .collect();
    let options = SolverOptions {
        max_iterations: config.max_iters,
        ..SolverOptions::default()
    };

    let mut stage1 = build(
        map,
        camera,
        &free,
        &fixed,
        &candidate_points,
        &BTreeSet::new(),
        Some(config.huber_delta),
    )?;
    let observations = stage1.edges.len();
    let report1 = solve_nonlinear(&mut stage1.problem, &options)?;

    let mut rejected = Vec::new();
    for (fi, edge) in stage1.edges.iter().enumerate() {
        let chi2 = stage1.problem.chi2(fi).unwrap_or(f64::INFINITY);
        if chi2 > config.chi2_threshold {
            rejected.push(*edge);
        }
    }
    let rejected_set: BTreeSet<_> = rejected.iter().copied().collect();

    // Stage 2 starts from the stage-1 estimate.
    let mut staged = map.clone();
    for (kf, var) in &stage1.poses {
        staged.keyframes.get_mut(kf).expect("window keyframe").pose = stage1.problem.pose(*var);
    }
    for (pid, var) in &stage1.points {
        staged.points.get_mut(pid).expect("window point").position = stage1.problem.point(*var);
    }
    let mut stage2 = build(
        &staged,
        camera,
        &free,
        &fixed,
        &candidate_points,
        &rejected_set,
        None,
    )?;
    let report2 = solve_nonlinear(&mut stage2.problem, &options)?;

    for (kf, var) in &stage2.poses {
        if free.contains(kf) {
            staged.keyframes.get_mut(kf).expect("window keyframe").pose = stage2.problem.pose(*var);
        }
    }
    for (pid, var) in &stage2.points {
        staged.points.get_mut(pid).expect("window point").position = stage2.problem.point(*var);
    }
    for (kf, pid) in &rejected {
        staged.remove_observation(*kf, *pid);
    }
    let mut culled = Vec::new();
    for pid in &candidate_points {
        let in_window: Vec<_> = map.points[pid]
            .observers
            .iter()
            .filter(|kf| stage1.poses.contains_key(kf))
            .copied()
            .collect();
        let all_rejected = !in_window.is_empty()
            && in_window
                .iter()
                .all(|kf| rejected_set.contains(&(*kf, *pid)));
        if all_rejected {
            staged.remove_point(*pid);
            culled.push(*pid);
        }
    }
    *map = staged;
    Ok(BaReport {
        window: window.clone(),
        frozen,
        observations,
        rejected,
        culled,
        stage1_poses: stage1
            .poses
            .iter()
            .map(|(kf, v)| (*kf, stage1.problem.pose(*v)))
            .collect(),
        stage1: report1,
        stage2: report2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp};
    use crate::uncertainty::{NoiseConfig, Observation};
    use nalgebra::{Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(px: Vector2<f64>) -> Observation {
        Observation::primary(px, &NoiseConfig::default()).unwrap()
    }

    /// Chain of keyframes along x looking down +z at a wall of points.
    fn scene(n_kf: usize, n_pts: usize, seed: u64) -> (Map, Vec<Vector3<f64>>, Vec<RigidPose>) {
        let cam = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = Map::new();
        let poses: Vec<_> = (0..n_kf)
            .map(|i| {
                RigidPose::new(
                    so3_exp(&Vector3::new(0.0, 0.02 * i as f64, 0.0)),
                    Vector3::new(0.3 * i as f64, 0.0, 0.0),
                )
            })
            .collect();
        let kfs: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| map.add_keyframe(i as f64, i, *p))
            .collect();
        let mut truth = Vec::new();
        for j in 0..n_pts {
            let p = Vector3::new(
                rng.random_range(-3.0..4.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(5.0..9.0),
            );
            let pid = map.add_point(p, j as u32);
            truth.push(p);
            for (kf, pose) in kfs.iter().zip(&poses) {
                if let Ok(px) = project(&cam, &pose.inverse(), &p) {
                    if cam.contains(&px) {
                        map.add_observation(*kf, pid, obs(px));
                    }
                }
            }
        }
        (map, truth, poses)
    }

    #[test]
    fn window_selection_chain() {
        // A-B share 40 points, B-C share 10.
        let mut m = Map::new();
        let a = m.add_keyframe(0.0, 0, RigidPose::identity());
        let b = m.add_keyframe(1.0, 1, RigidPose::identity());
        let c = m.add_keyframe(2.0, 2, RigidPose::identity());
        let o = obs(Vector2::new(100.0, 100.0));
        for i in 0..40 {
            let p = m.add_point(Vector3::zeros(), i);
            m.add_observation(a, p, o);
            m.add_observation(b, p, o);
        }
        for i in 0..10 {
            let p = m.add_point(Vector3::zeros(), 100 + i);
            m.add_observation(b, p, o);
            m.add_observation(c, p, o);
        }
        let w = covisible_window(&m, b, 20);
        assert_eq!(w.active, BTreeSet::from([a, b]));
        assert_eq!(w.fixed, BTreeSet::from([c]));
        let all = covisible_window(&m, b, 0);
        assert_eq!(all.active, BTreeSet::from([a, b, c]));
        assert!(all.fixed.is_empty());
    }

    #[test]
    fn noiseless_window_is_unchanged() {
        let (mut map, truth, poses) = scene(5, 80, 1);
        let before = map.clone();
        let window = covisible_window(&map, 4, 0);
        let report = local_ba(
            &mut map,
            &window,
            &CameraIntrinsics::default(),
            &BaConfig::default(),
        )
        .unwrap();
        assert!(report.rejected.is_empty());
        for (i, p) in poses.iter().enumerate() {
            let got = map.keyframes[&(i as u64)].pose;
            assert!((got.translation - p.translation).norm() < 1e-9);
            assert!(got.rotation.compose(&p.rotation.inverse()).angle() < 1e-9);
        }
        for (pid, mp) in &map.points {
            assert!((mp.position - truth[*pid as usize]).norm() < 1e-9);
        }
        assert_eq!(map.covisibility, before.covisibility);
        map.check_consistency().unwrap();
    }

    #[test]
    fn perturbed_window_converges_and_fixed_frames_are_untouched() {
        let (mut map, truth, poses) = scene(6, 120, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kf in 2..6u64 {
            let k = map.keyframes.get_mut(&kf).unwrap();
            k.pose = k.pose.retract(&[0.01, -0.01, 0.005, 0.02, -0.02, 0.01]);
        }
        for mp in map.points.values_mut() {
            mp.position += Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
        }
        let window = LocalWindow {
            active: (2..6).collect(),
            fixed: BTreeSet::from([0, 1]),
        };
        let fixed_before = (map.keyframes[&0].pose, map.keyframes[&1].pose);
        let report = local_ba(
            &mut map,
            &window,
            &CameraIntrinsics::default(),
            &BaConfig::default(),
        )
        .unwrap();
        assert_eq!(
            (map.keyframes[&0].pose, map.keyframes[&1].pose),
            fixed_before
        );
        assert!(report.stage2.final_cost <= report.stage1.initial_cost);
        for kf in 2..6u64 {
            let got = map.keyframes[&kf].pose;
            assert!((got.translation - poses[kf as usize].translation).norm() < 1e-6);
        }
        for (pid, mp) in &map.points {
            assert!((mp.position - truth[*pid as usize]).norm() < 1e-6);
        }
    }

    #[test]
    fn gross_outlier_is_gated() {
        let (mut map, _, _) = scene(5, 80, 4);
        let pid = *map.keyframes[&4]
            .observations
            .keys()
            .max_by_key(|p| (map.points[*p].observers.len(), std::cmp::Reverse(**p)))
            .unwrap();
        assert_eq!(map.points[&pid].observers.len(), 5);
        let o = map.keyframes[&4].observations[&pid];
        map.keyframes
            .get_mut(&4)
            .unwrap()
            .observations
            .insert(pid, obs(o.pixel + Vector2::new(40.0, 0.0)));
        let window = covisible_window(&map, 4, 0);
        let report = local_ba(
            &mut map,
            &window,
            &CameraIntrinsics::default(),
            &BaConfig::default(),
        )
        .unwrap();
        // The robust stage pulls the point slightly, so a neighbouring view of
        // the same point may also cross the gate; no other point is affected.
        assert!(report.rejected.contains(&(4, pid)), "{:?}", report.rejected);
        assert!(
            report.rejected.iter().all(|(_, p)| *p == pid),
            "{:?}",
            report.rejected
        );
        assert!(!map.keyframes[&4].observations.contains_key(&pid));
        map.check_consistency().unwrap();
    }

    #[test]
    fn point_with_all_observations_rejected_is_culled() {
        let (mut map, _, _) = scene(4, 60, 5);
        // Behind every camera: no observation can be evaluated.
        let pid = map.add_point(Vector3::new(0.0, 0.0, -7.0), 999);
        map.add_observation(0, pid, obs(Vector2::new(50.0, 50.0)));
        map.add_observation(1, pid, obs(Vector2::new(600.0, 400.0)));
        map.add_observation(2, pid, obs(Vector2::new(50.0, 400.0)));
        let window = covisible_window(&map, 3, 0);
        let report = local_ba(
            &mut map,
            &window,
            &CameraIntrinsics::default(),
            &BaConfig::default(),
        )
        .unwrap();
        assert!(report.culled.contains(&pid), "{:?}", report.rejected);
        assert!(!map.points.contains_key(&pid));
        map.check_consistency().unwrap();
    }
}
