//! Levenberg-Marquardt over poses, points and a log-parameterised scale.
//!
//! Point variables are eliminated with a Schur complement; the reduced
//! system over poses and scales is solved densely. Factors may carry a Huber
//! kernel on their whitened residual norm, applied through IRLS weights.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use thiserror::Error;

use super::factors::{
    pose_prior_residual, reprojection_residual, scale_relative_jacobians, scale_relative_residual,
    RelativeMeasurement,
};
use crate::geometry::{CameraIntrinsics, RigidPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("gauge is not fixed: problem has no prior factor and no fixed variable")]
    GaugeFree,
    #[error(
        "normal equations are singular after damping escalation (lambda {lambda:e}, {message})"
    )]
    Singular { lambda: f64, message: String },
    #[error("invalid factor {index}: {message}")]
    InvalidFactor { index: usize, message: String },
    #[error("invalid variable: {0}")]
    InvalidVariable(String),
    #[error("non-finite cost at the initial estimate")]
    NonFiniteCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Pose(RigidPose),
    Point(Vector3<f64>),
    /// Stored as the positive scale itself; optimised as `log(s)`.
    Scale(f64),
}

impl Value {
    fn dim(&self) -> usize {
        match self {
            Value::Pose(_) => 6,
            Value::Point(_) => 3,
            Value::Scale(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Variable {
    value: Value,
    fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionFactor {
    pub pose: VarId,
    pub point: VarId,
    pub pixel: Vector2<f64>,
    pub sigma: f64,
    pub camera: CameraIntrinsics,
}

/// Relative-pose constraint between two keyframes. With `scale` set this is
/// the scale-aware predictor factor; without it, a VO relative-pose factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePoseFactor {
    pub from: VarId,
    pub to: VarId,
    pub scale: Option<VarId>,
    pub measurement: RelativeMeasurement,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePriorFactor {
    pub pose: VarId,
    pub prior: RigidPose,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorKind {
    Reprojection(ReprojectionFactor),
    RelativePose(RelativePoseFactor),
    PosePrior(PosePriorFactor),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    /// Huber threshold on the whitened residual norm.
    pub huber: Option<f64>,
}

/// Counts of variables and factors by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProblemSummary {
    pub poses: usize,
    pub points: usize,
    pub scales: usize,
    pub reprojection: usize,
    pub scale_aware: usize,
    pub relative: usize,
    pub priors: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FactorProblem {
    vars: Vec<Variable>,
    factors: Vec<Factor>,
}

impl FactorProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Value, fixed: bool) -> VarId {
        self.vars.push(Variable { value, fixed });
        VarId(self.vars.len() - 1)
    }

    pub fn add_pose(&mut self, pose: RigidPose, fixed: bool) -> VarId {
        self.push(Value::Pose(pose), fixed)
    }

    pub fn add_point(&mut self, point: Vector3<f64>, fixed: bool) -> VarId {
        self.push(Value::Point(point), fixed)
    }

    pub fn add_scale(&mut self, s: f64, fixed: bool) -> Result<VarId, SolverError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(SolverError::InvalidVariable(format!(
                "scale must be positive (got {s})"
            )));
        }
        Ok(self.push(Value::Scale(s), fixed))
    }

    fn kind_of(&self, id: VarId) -> Option<&Value> {
        self.vars.get(id.0).map(|v| &v.value)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize, SolverError> {
        let index = self.factors.len();
        let bad = |m: &str| SolverError::InvalidFactor {
            index,
            message: m.to_string(),
        };
        let is_pose = |id: VarId| matches!(self.kind_of(id), Some(Value::Pose(_)));
        match &factor.kind {
            FactorKind::Reprojection(f) => {
                if !is_pose(f.pose) || !matches!(self.kind_of(f.point), Some(Value::Point(_))) {
                    return Err(bad("reprojection factor needs a pose and a point"));
                }
                if !(f.sigma > 0.0) {
                    return Err(bad("sigma must be positive"));
                }
            }
            FactorKind::RelativePose(f) => {
                if !is_pose(f.from) || !is_pose(f.to) {
                    return Err(bad("relative-pose factor needs two poses"));
                }
                if let Some(s) = f.scale {
                    if !matches!(self.kind_of(s), Some(Value::Scale(_))) {
                        return Err(bad("scale reference is not a scale variable"));
                    }
                }
                if !(f.sigma_rot > 0.0 && f.sigma_trans > 0.0) {
                    return Err(bad("sigmas must be positive"));
                }
            }
            FactorKind::PosePrior(f) => {
                if !is_pose(f.pose) {
                    return Err(bad("prior needs a pose"));
                }
                if !(f.sigma_rot > 0.0 && f.sigma_trans > 0.0) {
                    return Err(bad("sigmas must be positive"));
                }
            }
        }
        self.factors.push(factor);
        Ok(index)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn num_variables(&self) -> usize {
        self.vars.len()
    }

    pub fn is_fixed(&self, id: VarId) -> bool {
        self.vars[id.0].fixed
    }

    pub fn set_fixed(&mut self, id: VarId, fixed: bool) {
        self.vars[id.0].fixed = fixed;
    }

    pub fn pose(&self, id: VarId) -> RigidPose {
        match self.vars[id.0].value {
            Value::Pose(p) => p,
            other => panic!("variable {id:?} is not a pose: {other:?}"),
        }
    }

    pub fn point(&self, id: VarId) -> Vector3<f64> {
        match self.vars[id.0].value {
            Value::Point(p) => p,
            other => panic!("variable {id:?} is not a point: {other:?}"),
        }
    }

    pub fn scale(&self, id: VarId) -> f64 {
        match self.vars[id.0].value {
            Value::Scale(s) => s,
            other => panic!("variable {id:?} is not a scale: {other:?}"),
        }
    }

    pub fn summary(&self) -> ProblemSummary {
        let mut s = ProblemSummary::default();
        for v in &self.vars {
            match v.value {
                Value::Pose(_) => s.poses += 1,
                Value::Point(_) => s.points += 1,
                Value::Scale(_) => s.scales += 1,
            }
        }
        for f in &self.factors {
            match f.kind {
                FactorKind::Reprojection(_) => s.reprojection += 1,
                FactorKind::RelativePose(r) if r.scale.is_some() => s.scale_aware += 1,
                FactorKind::RelativePose(_) => s.relative += 1,
                FactorKind::PosePrior(_) => s.priors += 1,
            }
        }
        s
    }

    /// True when some prior or fixed variable pins the gauge.
    pub fn has_gauge_anchor(&self) -> bool {
        self.vars.iter().any(|v| v.fixed)
            || self
                .factors
                .iter()
                .any(|f| matches!(f.kind, FactorKind::PosePrior(_)))
    }

    /// Whitened residual of a factor at the current estimate, `None` if the
    /// factor cannot be evaluated (point behind the camera).
    pub fn whitened_residual(&self, index: usize) -> Option<DVector<f64>> {
        self.evaluate(&self.factors[index], &self.vars, false)
            .map(|l| l.residual)
    }

    /// Squared whitened residual norm (the chi-square statistic).
    pub fn chi2(&self, index: usize) -> Option<f64> {
        self.whitened_residual(index).map(|r| r.norm_squared())
    }

    pub fn set_huber(&mut self, index: usize, huber: Option<f64>) {
        self.factors[index].huber = huber;
    }

    /// Total robustified cost `0.5 * sum rho(|r|^2)` over evaluable factors.
    pub fn cost(&self) -> f64 {
        self.factors
            .iter()
            .filter_map(|f| {
                self.evaluate(f, &self.vars, false)
                    .map(|l| 0.5 * robust_rho(l.residual.norm_squared(), f.huber))
            })
            .sum()
    }

    fn evaluate(
        &self,
        factor: &Factor,
        vars: &[Variable],
        with_jacobians: bool,
    ) -> Option<Linearized> {
        let pose = |id: VarId| match vars[id.0].value {
            Value::Pose(p) => p,
            _ => unreachable!("validated at insertion"),
        };
        match &factor.kind {
            FactorKind::Reprojection(f) => {
                let point = match vars[f.point.0].value {
                    Value::Point(p) => p,
                    _ => unreachable!(),
                };
                let (r, jp, jx) =
                    reprojection_residual(&f.camera, &pose(f.pose), &point, &f.pixel).ok()?;
                let w = 1.0 / f.sigma;
                let mut blocks = Vec::new();
                if with_jacobians {
                    blocks.push((f.pose, DMatrix::from_fn(2, 6, |i, j| jp[(i, j)] * w)));
                    blocks.push((f.point, DMatrix::from_fn(2, 3, |i, j| jx[(i, j)] * w)));
                }
                Some(Linearized {
                    residual: DVector::from_iterator(2, r.iter().map(|v| v * w)),
                    blocks,
                })
            }
            FactorKind::RelativePose(f) => {
                let (ti, tj) = (pose(f.from), pose(f.to));
                let s = match f.scale {
                    Some(id) => match vars[id.0].value {
                        Value::Scale(s) => s,
                        _ => unreachable!(),
                    },
                    None => 1.0,
                };
                let r = scale_relative_residual(&ti, &tj, s, &f.measurement);
                let wv = [
                    1.0 / f.sigma_rot,
                    1.0 / f.sigma_rot,
                    1.0 / f.sigma_rot,
                    1.0 / f.sigma_trans,
                    1.0 / f.sigma_trans,
                    1.0 / f.sigma_trans,
                ];
                let mut blocks = Vec::new();
                if with_jacobians {
                    let j = scale_relative_jacobians(&ti, &tj, s, &f.measurement);
                    blocks.push((
                        f.from,
                        DMatrix::from_fn(6, 6, |a, b| j.d_pose_i[(a, b)] * wv[a]),
                    ));
                    blocks.push((
                        f.to,
                        DMatrix::from_fn(6, 6, |a, b| j.d_pose_j[(a, b)] * wv[a]),
                    ));
                    if let Some(id) = f.scale {
                        // Chain rule through s = exp(l).
                        blocks.push((id, DMatrix::from_fn(6, 1, |a, _| j.d_scale[a] * s * wv[a])));
                    }
                }
                Some(Linearized {
                    residual: DVector::from_fn(6, |a, _| r[a] * wv[a]),
                    blocks,
                })
            }
            FactorKind::PosePrior(f) => {
                let (r, j) = pose_prior_residual(&pose(f.pose), &f.prior);
                let wv = [
                    1.0 / f.sigma_rot,
                    1.0 / f.sigma_rot,
                    1.0 / f.sigma_rot,
                    1.0 / f.sigma_trans,
                    1.0 / f.sigma_trans,
                    1.0 / f.sigma_trans,
                ];
                let mut blocks = Vec::new();
                if with_jacobians {
                    blocks.push((f.pose, DMatrix::from_fn(6, 6, |a, b| j[(a, b)] * wv[a])));
                }
                Some(Linearized {
                    residual: DVector::from_fn(6, |a, _| r[a] * wv[a]),
                    blocks,
                })
            }
        }
    }
}

struct Linearized {
    residual: DVector<f64>,
    blocks: Vec<(VarId, DMatrix<f64>)>,
}

/// Huber on the squared norm: `s` inside, `2 d sqrt(s) - d^2` outside.
pub fn robust_rho(sq: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if sq > d * d => 2.0 * d * sq.sqrt() - d * d,
        _ => sq,
    }
}

fn robust_weight(sq: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if sq > d * d => d / sq.sqrt(),
        _ => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub relative_decrease_tol: f64,
    pub step_tol: f64,
    pub initial_lambda: f64,
    pub max_lambda: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_decrease_tol: 1e-6,
            step_tol: 1e-8,
            initial_lambda: 1e-5,
            max_lambda: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    /// Linear solves attempted, including rejected steps.
    pub evaluations: usize,
    pub converged: bool,
    /// Cost after the initial evaluation and after every accepted step.
    pub cost_history: Vec<f64>,
}

/// Layout of the free variables in the reduced (pose/scale) system and the
/// eliminated point blocks.
struct Layout {
    dense_offset: Vec<Option<usize>>,
    point_index: Vec<Option<usize>>,
    dense_dim: usize,
    num_points: usize,
}

impl Layout {
    fn new(vars: &[Variable]) -> Self {
        let mut dense_offset = vec![None; vars.len()];
        let mut point_index = vec![None; vars.len()];
        let mut dense_dim = 0;
        let mut num_points = 0;
        for (i, v) in vars.iter().enumerate() {
            if v.fixed {
                continue;
            }
            match v.value {
                Value::Point(_) => {
                    point_index[i] = Some(num_points);
                    num_points += 1;
                }
                other => {
                    dense_offset[i] = Some(dense_dim);
                    dense_dim += other.dim();
                }
            }
        }
        Self {
            dense_offset,
            point_index,
            dense_dim,
            num_points,
        }
    }
}

struct Normal {
    hcc: DMatrix<f64>,
    gc: DVector<f64>,
    hpp: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    /// Per point: (dense offset, block J_c^T J_p of size dim x 3).
    w: Vec<Vec<(usize, DMatrix<f64>)>>,
}

impl FactorProblem {
    fn build_normal(&self, layout: &Layout, active: &[bool]) -> Result<Normal, SolverError> {
        let mut n = Normal {
            hcc: DMatrix::zeros(layout.dense_dim, layout.dense_dim),
            gc: DVector::zeros(layout.dense_dim),
            hpp: vec![Matrix3::zeros(); layout.num_points],
            gp: vec![Vector3::zeros(); layout.num_points],
            w: vec![Vec::new(); layout.num_points],
        };
        for (fi, f) in self.factors.iter().enumerate() {
            if !active[fi] {
                continue;
            }
            let lin = self
                .evaluate(f, &self.vars, true)
                .expect("active factors are evaluable at the current estimate");
            let weight = robust_weight(lin.residual.norm_squared(), f.huber);
            let r = &lin.residual;
            let mut points_seen = 0;
            for (va, ja) in &lin.blocks {
                if let Some(pa) = layout.point_index[va.0] {
                    points_seen += 1;
                    if points_seen > 1 {
                        return Err(SolverError::InvalidFactor {
                            index: fi,
                            message: "factor couples two point variables".into(),
                        });
                    }
                    let jtj = ja.transpose() * ja * weight;
                    n.hpp[pa] += Matrix3::from_fn(|i, j| jtj[(i, j)]);
                    let jtr = ja.transpose() * r * weight;
                    n.gp[pa] += Vector3::new(jtr[0], jtr[1], jtr[2]);
                    for (vb, jb) in &lin.blocks {
                        if let Some(ob) = layout.dense_offset[vb.0] {
                            let blk = jb.transpose() * ja * weight;
                            match n.w[pa].iter_mut().find(|(o, _)| *o == ob) {
                                Some((_, m)) => *m += blk,
                                None => n.w[pa].push((ob, blk)),
                            }
                        }
                    }
                    continue;
                }
                let Some(oa) = layout.dense_offset[va.0] else {
                    continue;
                };
                let jtr = ja.transpose() * r * weight;
                let mut g = n.gc.rows_mut(oa, ja.ncols());
                g += jtr;
                for (vb, jb) in &lin.blocks {
                    if let Some(ob) = layout.dense_offset[vb.0] {
                        let blk = ja.transpose() * jb * weight;
                        let mut view = n.hcc.view_mut((oa, ob), (ja.ncols(), jb.ncols()));
                        view += blk;
                    }
                }
            }
        }
        Ok(n)
    }

    fn solve_step(&self, n: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let damp = |d: f64| d + lambda * (d + 1e-9);
        let mut s = n.hcc.clone();
        for i in 0..s.nrows() {
            s[(i, i)] = damp(n.hcc[(i, i)]);
        }
        let mut rhs = -n.gc.clone();
        let mut vinv = Vec::with_capacity(n.hpp.len());
        for (p, hpp) in n.hpp.iter().enumerate() {
            let mut v = *hpp;
            for i in 0..3 {
                v[(i, i)] = damp(hpp[(i, i)]);
            }
            let vi = v.try_inverse()?;
            for (oa, wa) in &n.w[p] {
                let wv = wa * vi;
                let mut r = rhs.rows_mut(*oa, wa.nrows());
                r += &wv * n.gp[p];
                for (ob, wb) in &n.w[p] {
                    let mut view = s.view_mut((*oa, *ob), (wa.nrows(), wb.nrows()));
                    view -= &wv * wb.transpose();
                }
            }
            vinv.push(vi);
        }
        let dc = if s.nrows() > 0 {
            let chol = s.cholesky()?;
            chol.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        if dc.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut dp = Vec::with_capacity(n.hpp.len());
        for (p, vi) in vinv.iter().enumerate() {
            let mut b = -n.gp[p];
            for (oa, wa) in &n.w[p] {
                let wt_dc = wa.transpose() * dc.rows(*oa, wa.nrows());
                b -= Vector3::new(wt_dc[0], wt_dc[1], wt_dc[2]);
            }
            dp.push(vi * b);
        }
        Some((dc, dp))
    }

    fn retracted(&self, layout: &Layout, dc: &DVector<f64>, dp: &[Vector3<f64>]) -> Vec<Variable> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let value = match (v.value, layout.dense_offset[i], layout.point_index[i]) {
                    (Value::Pose(p), Some(o), _) => {
                        Value::Pose(p.retract(dc.rows(o, 6).as_slice()))
                    }
                    (Value::Scale(s), Some(o), _) => Value::Scale(s * dc[o].exp()),
                    (Value::Point(x), _, Some(pi)) => Value::Point(x + dp[pi]),
                    (other, _, _) => other,
                };
                Variable {
                    value,
                    fixed: v.fixed,
                }
            })
            .collect()
    }

    fn cost_of(&self, vars: &[Variable], active: &[bool]) -> f64 {
        let mut total = 0.0;
        for (fi, f) in self.factors.iter().enumerate() {
            if !active[fi] {
                continue;
            }
            match self.evaluate(f, vars, false) {
                Some(l) => total += 0.5 * robust_rho(l.residual.norm_squared(), f.huber),
                None => return f64::INFINITY,
            }
        }
        total
    }
}

/// Minimises the robustified cost in place.
///
/// Factors that cannot be evaluated at the initial estimate are ignored for
/// the whole solve; a trial step that makes an active factor unevaluable is
/// rejected.
pub fn solve_nonlinear(
    problem: &mut FactorProblem,
    options: &SolverOptions,
) -> Result<SolveReport, SolverError> {
    if !problem.has_gauge_anchor() {
        return Err(SolverError::GaugeFree);
    }
    let layout = Layout::new(&problem.vars);
    let active: Vec<bool> = problem
        .factors
        .iter()
        .map(|f| problem.evaluate(f, &problem.vars, false).is_some())
        .collect();
    let mut cost = problem.cost_of(&problem.vars, &active);
    if !cost.is_finite() {
        return Err(SolverError::NonFiniteCost);
    }
    let mut report = SolveReport {
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        evaluations: 0,
        converged: false,
        cost_history: vec![cost],
    };
    if layout.dense_dim == 0 && layout.num_points == 0 {
        report.converged = true;
        return Ok(report);
    }
    let mut lambda = options.initial_lambda;
    let mut normal = problem.build_normal(&layout, &active)?;
    while report.iterations < options.max_iterations {
        report.evaluations += 1;
        let Some((dc, dp)) = problem.solve_step(&normal, lambda) else {
            lambda *= 10.0;
            if lambda > options.max_lambda {
                return Err(SolverError::Singular {
                    lambda,
                    message: "Cholesky factorisation failed".into(),
                });
            }
            continue;
        };
        let step_norm =
            (dc.norm_squared() + dp.iter().map(|v| v.norm_squared()).sum::<f64>()).sqrt();
        if step_norm < options.step_tol {
            report.converged = true;
            break;
        }
        let trial = problem.retracted(&layout, &dc, &dp);
        let new_cost = problem.cost_of(&trial, &active);
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            problem.vars = trial;
            cost = new_cost;
            report.iterations += 1;
            report.cost_history.push(cost);
            lambda = (lambda * 0.1).max(1e-15);
            if decrease < options.relative_decrease_tol {
                report.converged = true;
                break;
            }
            normal = problem.build_normal(&layout, &active)?;
        } else {
            lambda *= 10.0;
            if lambda > options.max_lambda {
                // No descent direction left at this precision.
                report.converged = true;
                break;
            }
        }
    }
    report.final_cost = cost;
    Ok(report)
}
