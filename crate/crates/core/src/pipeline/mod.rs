//! End-to-end orchestration: the frontend tracks every frame, stage-1 local
//! BA refines keyframes, and predictor sub-graphs are bound into a
//! consistent scale by stage-2 pose-graph optimisation as they arrive.

pub mod config;
pub mod engine;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::alignment::{ate_rmse, AlignMode, TrajectoryEntry, TrajectorySegment};
use crate::backend::{KeyframeId, SubGraph};
use crate::frontend::{TrackProvider, TrackerMode};
use crate::simulator::{
    generate_scenario, PredictorInput, PredictorSimulator, Scenario, SimulatedTracks,
    SimulatorError,
};

pub use config::{ConfigError, DegradationConfig, KeyframePolicy, PipelineConfig, PipelineFlags};
pub use engine::{
    FeatureTrack, FrameEstimate, Pipeline, PipelineStats, Predictor, TrackStatus, WindowSummary,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error("tracking lost at frame {frame}: {reason}")]
    TrackingLost { frame: usize, reason: String },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

/// Predictor backed by the simulator: keyframe poses and visible landmarks
/// come from the scenario's ground truth.
pub struct SimulatedPredictor<'a> {
    pub scenario: &'a Scenario,
    pub simulator: PredictorSimulator,
    /// Hidden scale of every prediction made so far.
    pub hidden_scales: Vec<f64>,
}

impl<'a> SimulatedPredictor<'a> {
    pub fn new(scenario: &'a Scenario, config: &PipelineConfig) -> Result<Self, SimulatorError> {
        Ok(Self {
            scenario,
            simulator: PredictorSimulator::new(config.predictor, config.seed)?,
            hidden_scales: Vec::new(),
        })
    }
}

impl Predictor for SimulatedPredictor<'_> {
    fn predict(
        &mut self,
        index: usize,
        keyframes: &[(KeyframeId, usize, f64)],
        dispatched_at: f64,
    ) -> Result<SubGraph, String> {
        let inputs: Vec<PredictorInput> = keyframes
            .iter()
            .map(|(id, frame, t)| {
                let f = &self.scenario.frames[*frame];
                PredictorInput {
                    keyframe: *id,
                    timestamp: *t,
                    pose: self.scenario.pose(*frame),
                    cloud: f
                        .visible
                        .iter()
                        .map(|(landmark, track)| {
                            (*track, self.scenario.world.landmarks[*landmark as usize])
                        })
                        .collect(),
                }
            })
            .collect();
        let (sub, truth) = self
            .simulator
            .predict(index, &inputs, dispatched_at)
            .map_err(|e| e.to_string())?;
        self.hidden_scales.push(truth.hidden_scale);
        Ok(sub)
    }
}

/// How a run is executed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Single execution context and no wall-clock measurements, so every
    /// output is a pure function of the configuration.
    pub deterministic: bool,
}

/// Machine-readable run report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub frames: usize,
    pub processed_frames: usize,
    pub keyframes: usize,
    pub ate_highfreq_m: Option<f64>,
    pub ate_optimized_m: Option<f64>,
    pub scale_estimates: Vec<f64>,
    pub rejection_rates: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frontend_ms_p50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frontend_ms_p99: Option<f64>,
    pub frontend_work: u64,
    pub robust_frames: usize,
    pub flagged_frames: usize,
    pub subgraphs_dispatched: usize,
    pub subgraphs_delivered: usize,
    pub pgo_failures: usize,
    pub ba_failures: usize,
    pub tracking_lost: bool,
}

impl Metrics {
    /// Flat `key=value` report, one key per line, lists comma-separated and
    /// missing values written as `nan`.
    pub fn to_key_value(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x}"));
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = vec![
            format!("frames={}", self.frames),
            format!("processed_frames={}", self.processed_frames),
            format!("keyframes={}", self.keyframes),
            format!("ate_highfreq_m={}", opt(self.ate_highfreq_m)),
            format!("ate_optimized_m={}", opt(self.ate_optimized_m)),
            format!("scale_estimates={}", list(&self.scale_estimates)),
            format!("rejection_rates={}", list(&self.rejection_rates)),
        ];
        if let Some(p) = self.frontend_ms_p50 {
            lines.push(format!("frontend_ms_p50={p}"));
        }
        if let Some(p) = self.frontend_ms_p99 {
            lines.push(format!("frontend_ms_p99={p}"));
        }
        lines.extend([
            format!("frontend_work={}", self.frontend_work),
            format!("robust_frames={}", self.robust_frames),
            format!("flagged_frames={}", self.flagged_frames),
            format!("subgraphs_dispatched={}", self.subgraphs_dispatched),
            format!("subgraphs_delivered={}", self.subgraphs_delivered),
            format!("pgo_failures={}", self.pgo_failures),
            format!("ba_failures={}", self.ba_failures),
            format!("tracking_lost={}", self.tracking_lost),
        ]);
        lines.join("\n") + "\n"
    }
}

/// Everything a run produces. A lost track ends the run early; the outputs
/// then cover the frames processed until then.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ground_truth: TrajectorySegment,
    pub highfreq: Vec<FrameEstimate>,
    /// (frame index, timestamp, pose) per keyframe.
    pub optimized: Vec<(usize, f64, crate::geometry::RigidPose)>,
    pub stats: PipelineStats,
    pub hidden_scales: Vec<f64>,
    pub error: Option<PipelineError>,
    pub metrics: Metrics,
}

impl RunOutput {
    pub fn highfreq_trajectory(&self) -> Option<TrajectorySegment> {
        TrajectorySegment::new(
            self.highfreq
                .iter()
                .map(|e| TrajectoryEntry {
                    id: e.frame as u64,
                    timestamp: e.timestamp,
                    pose: e.pose,
                })
                .collect(),
        )
        .ok()
    }

    pub fn optimized_trajectory(&self) -> Option<TrajectorySegment> {
        TrajectorySegment::new(
            self.optimized
                .iter()
                .map(|(frame, t, pose)| TrajectoryEntry {
                    id: *frame as u64,
                    timestamp: *t,
                    pose: *pose,
                })
                .collect(),
        )
        .ok()
    }

    pub fn tracking_lost(&self) -> bool {
        matches!(self.error, Some(PipelineError::TrackingLost { .. }))
    }
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    Some(sorted[i])
}

/// Simulates the configured scenario and runs the pipeline over it.
pub fn run_config(
    config: &PipelineConfig,
    options: RunOptions,
) -> Result<RunOutput, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let scenario = generate_scenario(&config.world, &config.trajectory, config.seed)?;
    run_scenario(&scenario, config, options)
}

/// Runs the pipeline over an existing scenario.
pub fn run_scenario(
    scenario: &Scenario,
    config: &PipelineConfig,
    options: RunOptions,
) -> Result<RunOutput, PipelineError> {
    let mut pipeline = Pipeline::new(config.clone(), !options.deterministic)?;
    let mut tracks = SimulatedTracks::new(
        scenario,
        config.predictor,
        config.degradation.events.clone(),
        config.seed,
    );
    let mut predictor = SimulatedPredictor::new(scenario, config)?;
    let mut timings = Vec::new();
    let mut error = None;
    for frame in 0..tracks.frame_count() {
        let start = (!options.deterministic).then(Instant::now);
        match pipeline.process_frame(frame, &mut tracks, &mut predictor) {
            Ok(_) => {}
            Err(e @ PipelineError::TrackingLost { .. }) => {
                error = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(s) = start {
            timings.push(s.elapsed().as_secs_f64() * 1e3);
        }
    }
    pipeline.finish();

    let highfreq = pipeline.highfreq().to_vec();
    let optimized = pipeline.optimized_keyframes();
    let stats = pipeline.stats().clone();
    let mut output = RunOutput {
        ground_truth: scenario.ground_truth.clone(),
        highfreq,
        optimized,
        stats,
        hidden_scales: predictor.hidden_scales,
        error,
        metrics: Metrics {
            frames: scenario.frames.len(),
            processed_frames: 0,
            keyframes: pipeline.map().keyframes.len(),
            ate_highfreq_m: None,
            ate_optimized_m: None,
            scale_estimates: Vec::new(),
            rejection_rates: Vec::new(),
            frontend_ms_p50: None,
            frontend_ms_p99: None,
            frontend_work: 0,
            robust_frames: 0,
            flagged_frames: 0,
            subgraphs_dispatched: 0,
            subgraphs_delivered: 0,
            pgo_failures: 0,
            ba_failures: 0,
            tracking_lost: false,
        },
    };
    timings.sort_by(|a, b| a.total_cmp(b));
    let gap = 0.5 / config.trajectory.rate;
    let ate = |seg: Option<TrajectorySegment>| {
        seg.and_then(|s| ate_rmse(&s, &output.ground_truth, AlignMode::Sim3, gap).ok())
    };
    let m = Metrics {
        processed_frames: output.highfreq.len(),
        ate_highfreq_m: ate(output.highfreq_trajectory()),
        ate_optimized_m: ate(output.optimized_trajectory()),
        scale_estimates: output.stats.windows.iter().map(|w| w.scale).collect(),
        rejection_rates: output.stats.rejection_rates.clone(),
        frontend_ms_p50: percentile(&timings, 0.5),
        frontend_ms_p99: percentile(&timings, 0.99),
        frontend_work: output.highfreq.iter().map(|e| e.work).sum(),
        robust_frames: output
            .highfreq
            .iter()
            .filter(|e| e.mode == TrackerMode::Robust)
            .count(),
        flagged_frames: output.highfreq.iter().filter(|e| e.flagged).count(),
        subgraphs_dispatched: output.stats.dispatched,
        subgraphs_delivered: output.stats.delivered,
        pgo_failures: output.stats.pgo_failures.len(),
        ba_failures: output.stats.ba_failures,
        tracking_lost: output.tracking_lost(),
        ..output.metrics.clone()
    };
    output.metrics = m;
    Ok(output)
}

/// Keyframes per dispatched sub-graph, for inspection in tests.
pub fn window_scales(output: &RunOutput) -> BTreeMap<usize, f64> {
    output
        .stats
        .windows
        .iter()
        .map(|w| (w.index, w.scale))
        .collect()
}
