//! Keyframe map, local bundle adjustment and scale-aware pose graph
//! optimisation, all built on one sparse Levenberg-Marquardt solver.

pub mod ba;
pub mod factors;
pub mod map;
pub mod pgo;
pub mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::AlignmentError;
pub use ba::{covisible_window, local_ba, BaConfig, BaReport, LocalWindow};
pub use map::{CovisibilityGraph, Keyframe, KeyframeId, Map, MapPoint, MapPointId};
pub use pgo::{
    build_local_pgo, run_local_pgo, PgoConfig, PgoProblem, PgoResult, ScaleBinder, ScaleMode,
    SubGraph,
};
pub use solver::{solve_nonlinear, FactorProblem, SolveReport, SolverError, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("local BA window has no active keyframe")]
    EmptyWindow,
    #[error("invalid sub-graph structure: {0}")]
    Structure(String),
}

/// The `[backend]` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub covis_threshold: u32,
    pub chi2_threshold: f64,
    pub max_iters: usize,
    pub huber_delta: f64,
    pub min_fixed: usize,
    /// Prior tightness on the first keyframe of each PGO window.
    pub anchor_sigma: f64,
    pub pgo: PgoConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let ba = BaConfig::default();
        let pgo = PgoConfig::default();
        Self {
            covis_threshold: ba.covis_threshold,
            chi2_threshold: ba.chi2_threshold,
            max_iters: ba.max_iters,
            huber_delta: ba.huber_delta,
            min_fixed: ba.min_fixed,
            anchor_sigma: pgo.anchor_sigma,
            pgo,
        }
    }
}

impl BackendConfig {
    pub fn ba(&self) -> BaConfig {
        BaConfig {
            covis_threshold: self.covis_threshold,
            chi2_threshold: self.chi2_threshold,
            max_iters: self.max_iters,
            huber_delta: self.huber_delta,
            min_fixed: self.min_fixed,
        }
    }

    pub fn pgo(&self) -> PgoConfig {
        PgoConfig {
            anchor_sigma: self.anchor_sigma,
            ..self.pgo
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.ba().validate()?;
        self.pgo().validate()
    }
}
