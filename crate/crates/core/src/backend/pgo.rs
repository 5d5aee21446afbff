//! Scale-aware pose graph optimisation over two consecutive predictor
//! sub-graphs.
//!
//! Each sub-graph is a batch of keyframes whose relative poses were predicted
//! up to an unknown scale. Consecutive sub-graphs share one overlap keyframe.
//! The local graph holds the keyframes of the previous and the newest
//! sub-graph, one shared scale `s` (log-parameterised), predictor factors
//! between consecutive keyframes of each sub-graph, VO relative-pose factors
//! from the current map, and a tight prior on the first keyframe.
//!
//! `s` is expressed in the newest sub-graph's predictor units. The previous
//! sub-graph's translations are converted into those units with a bridge
//! factor before entering the graph; see [`ScaleBinder`].

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::factors::RelativeMeasurement;
use super::solver::{
    solve_nonlinear, Factor, FactorKind, FactorProblem, PosePriorFactor, ProblemSummary,
    RelativePoseFactor, SolveReport, SolverOptions, VarId,
};
use super::BackendError;
use crate::alignment::{
    align_predictor_trajectory, cloud_scale_ratio, AlignmentError, AlignmentResult,
    TrajectoryEntry, TrajectorySegment, DEFAULT_GAMMA,
};
use crate::geometry::{relative_pose, RigidPose};

/// How the shared scale is carried from one window to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Each predictor inference has its own scale; the previous sub-graph is
    /// converted into the newest one's units with its refined scale.
    PerWindow,
    /// One scale for the whole run, warm-started from the previous window.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoConfig {
    /// Pre-scaling applied to predictor translations before alignment.
    pub gamma: f64,
    /// Predictor factor noise at unit mean confidence.
    pub rot_sigma: f64,
    pub trans_sigma: f64,
    pub vo_rot_sigma: f64,
    pub vo_trans_sigma: f64,
    /// Set from `backend.anchor_sigma`.
    #[serde(skip)]
    pub anchor_sigma: f64,
    pub scale_mode: ScaleMode,
    pub max_iters: usize,
}

impl Default for PgoConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            rot_sigma: 0.01,
            trans_sigma: 0.05,
            vo_rot_sigma: 0.005,
            vo_trans_sigma: 0.01,
            anchor_sigma: 1e-6,
            scale_mode: ScaleMode::PerWindow,
            max_iters: 50,
        }
    }
}

impl PgoConfig {
    pub fn validate(&self) -> Result<(), String> {
        let sigmas = [
            self.rot_sigma,
            self.trans_sigma,
            self.vo_rot_sigma,
            self.vo_trans_sigma,
            self.anchor_sigma,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err("PGO noise sigmas must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma must be positive (got {})", self.gamma));
        }
        Ok(())
    }
}

/// One predictor inference over a batch of keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraph {
    pub index: usize,
    pub keyframes: Vec<u64>,
    pub timestamps: Vec<f64>,
    /// Predicted world-from-camera poses in the predictor's own frame and units.
    pub poses: Vec<RigidPose>,
    /// Mean per-keyframe prediction confidence in `(0, 1]`.
    pub confidences: Vec<f64>,
    /// Predicted points in the first and last keyframe's camera frame, keyed
    /// by track id, in predictor units.
    pub first_cloud: Vec<(u32, Vector3<f64>)>,
    pub last_cloud: Vec<(u32, Vector3<f64>)>,
    pub dispatched_at: f64,
    pub deliver_at: f64,
}

impl SubGraph {
    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let n = self.keyframes.len();
        if n < 2 {
            return Err(BackendError::Structure(format!(
                "sub-graph {} has {n} keyframes, need at least 2",
                self.index
            )));
        }
        if self.timestamps.len() != n || self.poses.len() != n || self.confidences.len() != n {
            return Err(BackendError::Structure(format!(
                "sub-graph {} has inconsistent field lengths",
                self.index
            )));
        }
        if self.confidences.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(BackendError::Structure(format!(
                "sub-graph {} has confidences outside (0, 1]",
                self.index
            )));
        }
        Ok(())
    }

    pub fn first(&self) -> u64 {
        self.keyframes[0]
    }

    pub fn last(&self) -> u64 {
        *self.keyframes.last().expect("non-empty sub-graph")
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidences.iter().sum::<f64>() / self.confidences.len().max(1) as f64
    }

    /// Predicted poses as a trajectory whose entry ids are keyframe ids.
    pub fn segment(&self) -> Result<TrajectorySegment, AlignmentError> {
        TrajectorySegment::new(
            self.keyframes
                .iter()
                .zip(&self.timestamps)
                .zip(&self.poses)
                .map(|((id, t), pose)| TrajectoryEntry {
                    id: *id,
                    timestamp: *t,
                    pose: *pose,
                })
                .collect(),
        )
    }

    /// Relative predicted motion from keyframe `k` to `k + 1`.
    pub fn relative(&self, k: usize) -> RelativeMeasurement {
        RelativeMeasurement::from_pose(&relative_pose(&self.poses[k], &self.poses[k + 1]))
    }
}

/// Relative-pose constraint between two keyframes taken from the VO map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoConstraint {
    pub from: u64,
    pub to: u64,
    pub relative: RigidPose,
}

/// VO constraints between consecutive ids.
pub fn consecutive_vo_constraints(
    ids: &[u64],
    vo_poses: &BTreeMap<u64, RigidPose>,
) -> Vec<VoConstraint> {
    ids.windows(2)
        .filter_map(|w| {
            let a = vo_poses.get(&w[0])?;
            let b = vo_poses.get(&w[1])?;
            Some(VoConstraint {
                from: w[0],
                to: w[1],
                relative: relative_pose(a, b),
            })
        })
        .collect()
}

pub struct PgoProblem {
    pub problem: FactorProblem,
    pub poses: BTreeMap<u64, VarId>,
    pub scale: VarId,
    pub anchor: u64,
    /// Factor converting the previous sub-graph's predictor units into the
    /// newest one's (1 for a bootstrap window).
    pub bridge: f64,
}

impl PgoProblem {
    pub fn summary(&self) -> ProblemSummary {
        self.problem.summary()
    }
}

/// Builds the local graph. `previous` carries the previous sub-graph and its
/// bridge factor; without it this is a bootstrap window over `next` alone.
pub fn build_local_pgo(
    previous: Option<(&SubGraph, f64)>,
    next: &SubGraph,
    vo_poses: &BTreeMap<u64, RigidPose>,
    vo_constraints: &[VoConstraint],
    s_init: f64,
    config: &PgoConfig,
) -> Result<PgoProblem, BackendError> {
    next.validate()?;
    let mut ids: Vec<u64> = Vec::new();
    let mut bridge = 1.0;
    if let Some((prev, rho)) = previous {
        prev.validate()?;
        if prev.last() != next.first() {
            return Err(BackendError::Structure(format!(
                "sub-graphs {} and {} do not share an overlap keyframe",
                prev.index, next.index
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(BackendError::Structure(format!(
                "bridge factor must be positive (got {rho})"
            )));
        }
        bridge = rho;
        ids.extend(&prev.keyframes);
        ids.extend(&next.keyframes[1..]);
    } else {
        ids.extend(&next.keyframes);
    }

    let mut problem = FactorProblem::new();
    let mut poses = BTreeMap::new();
    for id in &ids {
        let pose = vo_poses
            .get(id)
            .ok_or_else(|| BackendError::Structure(format!("keyframe {id} has no VO pose")))?;
        if poses.insert(*id, problem.add_pose(*pose, false)).is_some() {
            return Err(BackendError::Structure(format!(
                "keyframe {id} appears twice"
            )));
        }
    }
    let scale = problem.add_scale(s_init, false)?;

    let anchor = ids[0];
    problem.add_factor(Factor {
        kind: FactorKind::PosePrior(PosePriorFactor {
            pose: poses[&anchor],
            prior: vo_poses[&anchor],
            sigma_rot: config.anchor_sigma,
            sigma_trans: config.anchor_sigma,
        }),
        huber: None,
    })?;

    let mut add_predictor = |sub: &SubGraph, factor: f64| -> Result<(), BackendError> {
        let c = sub.mean_confidence().sqrt();
        for k in 0..sub.len() - 1 {
            let mut measurement = sub.relative(k);
            measurement.translation *= factor;
            problem.add_factor(Factor {
                kind: FactorKind::RelativePose(RelativePoseFactor {
                    from: poses[&sub.keyframes[k]],
                    to: poses[&sub.keyframes[k + 1]],
                    scale: Some(scale),
                    measurement,
                    sigma_rot: config.rot_sigma / c,
                    sigma_trans: config.trans_sigma / c,
                }),
                huber: None,
            })?;
        }
        Ok(())
    };
    if let Some((prev, _)) = previous {
        add_predictor(prev, bridge)?;
    }
    add_predictor(next, 1.0)?;

    for c in vo_constraints {
        let (Some(from), Some(to)) = (poses.get(&c.from), poses.get(&c.to)) else {
            continue;
        };
        problem.add_factor(Factor {
            kind: FactorKind::RelativePose(RelativePoseFactor {
                from: *from,
                to: *to,
                scale: None,
                measurement: RelativeMeasurement::from_pose(&c.relative),
                sigma_rot: config.vo_rot_sigma,
                sigma_trans: config.vo_trans_sigma,
            }),
            huber: None,
        })?;
    }
    Ok(PgoProblem {
        problem,
        poses,
        scale,
        anchor,
        bridge,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgoResult {
    pub poses: BTreeMap<u64, RigidPose>,
    pub scale: f64,
    pub report: SolveReport,
    pub summary: ProblemSummary,
}

pub fn run_local_pgo(mut pgo: PgoProblem, config: &PgoConfig) -> Result<PgoResult, BackendError> {
    let options = SolverOptions {
        max_iterations: config.max_iters,
        relative_decrease_tol: 1e-12,
        step_tol: 1e-12,
        ..SolverOptions::default()
    };
    let report = solve_nonlinear(&mut pgo.problem, &options)?;
    let poses = pgo
        .poses
        .iter()
        .map(|(id, v)| (*id, pgo.problem.pose(*v)))
        .collect();
    Ok(PgoResult {
        poses,
        scale: pgo.problem.scale(pgo.scale),
        report,
        summary: pgo.problem.summary(),
    })
}

/// Scale taking predictor translations onto VO translations. Falls back to
/// the ratio of spreads about the centroid when the keyframes are too close
/// to collinear for a full similarity fit.
pub fn predictor_scale(
    sub: &SubGraph,
    vo_poses: &BTreeMap<u64, RigidPose>,
    gamma: f64,
) -> Result<AlignmentResult, BackendError> {
    let pred = sub.segment()?;
    let vo = TrajectorySegment::new(
        sub.keyframes
            .iter()
            .zip(&sub.timestamps)
            .map(|(id, t)| {
                vo_poses
                    .get(id)
                    .map(|pose| TrajectoryEntry {
                        id: *id,
                        timestamp: *t,
                        pose: *pose,
                    })
                    .ok_or_else(|| BackendError::Structure(format!("keyframe {id} has no VO pose")))
            })
            .collect::<Result<_, _>>()?,
    )?;
    match align_predictor_trajectory(&vo, &pred, gamma) {
        Ok(r) => Ok(r),
        Err(AlignmentError::DegenerateConfiguration { .. }) => {
            let spread = |pts: &[Vector3<f64>]| {
                let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
                pts.iter().map(|p| (p - mean).norm()).sum::<f64>()
            };
            let sp = spread(&pred.translations());
            let sv = spread(&vo.translations());
            if !(sp > 0.0 && sv > 0.0) {
                return Err(AlignmentError::DegenerateConfiguration {
                    singular_values: [sp, sv, 0.0],
                }
                .into());
            }
            let mut r = AlignmentResult {
                transform: Default::default(),
                fused_scale: sv / sp,
                rms: f64::NAN,
            };
            r.transform.scale = r.fused_scale / gamma;
            Ok(r)
        }
        Err(e) => Err(e.into()),
    }
}

/// Result of one window of the windowed scale estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub index: usize,
    pub bootstrap: bool,
    /// Scale from aligning the newest sub-graph alone.
    pub fused_scale: f64,
    pub s_init: f64,
    /// Refined scale, newest sub-graph units to VO units.
    pub scale: f64,
    pub bridge: f64,
    pub poses: BTreeMap<u64, RigidPose>,
    pub summary: ProblemSummary,
    pub report: SolveReport,
}

/// Runs local PGO over each newly delivered sub-graph and its predecessor.
#[derive(Debug, Clone)]
pub struct ScaleBinder {
    config: PgoConfig,
    previous: Option<(SubGraph, f64)>,
}

impl ScaleBinder {
    pub fn new(config: PgoConfig) -> Self {
        Self {
            config,
            previous: None,
        }
    }

    pub fn config(&self) -> &PgoConfig {
        &self.config
    }

    /// Refined scale of the last processed sub-graph.
    pub fn last_scale(&self) -> Option<f64> {
        self.previous.as_ref().map(|(_, s)| *s)
    }

    /// Processes `sub` against the current VO keyframe poses. On failure the
    /// estimator restarts with a bootstrap window at the next sub-graph.
    pub fn process(
        &mut self,
        sub: SubGraph,
        vo_poses: &BTreeMap<u64, RigidPose>,
    ) -> Result<WindowOutcome, BackendError> {
        let previous = self
            .previous
            .take()
            .filter(|(p, _)| p.last() == sub.first());
        let alignment = predictor_scale(&sub, vo_poses, self.config.gamma)?;
        let s_f = alignment.fused_scale;
        let (s_init, bridge) = match (&previous, self.config.scale_mode) {
            (None, _) => (s_f, 1.0),
            (Some((_, s_prev)), ScaleMode::PerWindow) => (s_f, s_prev / s_f),
            (Some((_, s_prev)), ScaleMode::Global) => (*s_prev, 1.0),
        };
        let mut ids: Vec<u64> = Vec::new();
        if let Some((p, _)) = &previous {
            ids.extend(&p.keyframes);
        }
        ids.extend(&sub.keyframes[usize::from(previous.is_some())..]);
        let constraints = consecutive_vo_constraints(&ids, vo_poses);
        let problem = build_local_pgo(
            previous.as_ref().map(|(p, _)| (p, bridge)),
            &sub,
            vo_poses,
            &constraints,
            s_init,
            &self.config,
        )?;
        let result = run_local_pgo(problem, &self.config)?;
        let outcome = WindowOutcome {
            index: sub.index,
            bootstrap: previous.is_none(),
            fused_scale: s_f,
            s_init,
            scale: result.scale,
            bridge,
            poses: result.poses,
            summary: result.summary,
            report: result.report,
        };
        self.previous = Some((sub, result.scale));
        Ok(outcome)
    }
}

/// Scale of every sub-graph obtained by chaining point-cloud ratios at the
/// overlap keyframes, starting from `initial` for the first sub-graph. Errors
/// compound along the chain; this exists as a comparison baseline.
pub fn chain_cloud_scales(subs: &[SubGraph], initial: f64) -> Result<Vec<f64>, AlignmentError> {
    let mut out = Vec::with_capacity(subs.len());
    let mut s = initial;
    for (i, sub) in subs.iter().enumerate() {
        if i > 0 {
            s *= cloud_scale_ratio(&subs[i - 1].last_cloud, &sub.first_cloud)?;
        }
        out.push(s);
    }
    Ok(out)
}
