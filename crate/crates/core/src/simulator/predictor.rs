//! Synthetic feed-forward predictor.
//!
//! A prediction covers one batch of keyframes. Poses are expressed in the
//! first keyframe's camera frame, translations are divided by the batch's
//! metric extent (the predictor's scale normalisation) and multiplied by a
//! hidden per-batch scale that drifts as a log-normal random walk. Point
//! clouds for the first and last keyframe carry their own depth bias. The
//! hidden quantities are returned separately and never reach the estimator.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{check_sigma, normal, stream_rng, SimulatorError};
use crate::backend::SubGraph;
use crate::geometry::{so3_exp, RigidPose};

/// The `[predictor]` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorModel {
    pub batch_size: usize,
    /// Hidden scale of the first batch.
    pub scale: f64,
    /// Standard deviation of the log-scale random walk between batches.
    pub scale_drift: f64,
    /// Divide translations by the batch's metric extent.
    pub normalize: bool,
    /// Rotation noise in radians per axis.
    pub rot_noise: f64,
    /// Translation noise after normalisation, in predictor units.
    pub trans_noise: f64,
    /// Confidences are drawn uniformly from `[conf_min, conf_max]`.
    pub conf_min: f64,
    pub conf_max: f64,
    /// Probability that a robust track keeps reporting a landmark that left
    /// the image, clamped to the border.
    pub stick_probability: f64,
    /// Frames for which a stuck track persists after the landmark exits.
    pub stick_frames: usize,
    /// Confidence multiplier of stuck observations.
    pub stick_confidence: f64,
    /// Distance in pixels from the border at which stuck tracks are clamped.
    pub stick_offset: f64,
    /// Relative depth bias of each predicted point cloud.
    pub cloud_bias: f64,
    /// Relative per-point depth noise of predicted point clouds.
    pub cloud_noise: f64,
    /// Delivery delay after dispatch, simulated seconds.
    pub latency: f64,
}

impl Default for PredictorModel {
    fn default() -> Self {
        Self {
            batch_size: 10,
            scale: 1.0,
            scale_drift: 0.3,
            normalize: true,
            rot_noise: 0.002,
            trans_noise: 0.005,
            conf_min: 0.5,
            conf_max: 1.0,
            stick_probability: 0.0,
            stick_frames: 5,
            stick_confidence: 0.8,
            stick_offset: 1.0,
            cloud_bias: 0.05,
            cloud_noise: 0.02,
            latency: 2.8,
        }
    }
}

impl PredictorModel {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.batch_size < 2 {
            return Err(SimulatorError::InvalidSpec(format!(
                "batch_size must be >= 2 (got {})",
                self.batch_size
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(SimulatorError::InvalidSpec(format!(
                "scale must be > 0 (got {})",
                self.scale
            )));
        }
        for (name, v) in [
            ("scale_drift", self.scale_drift),
            ("rot_noise", self.rot_noise),
            ("trans_noise", self.trans_noise),
            ("stick_offset", self.stick_offset),
            ("cloud_bias", self.cloud_bias),
            ("cloud_noise", self.cloud_noise),
            ("latency", self.latency),
        ] {
            check_sigma(name, v)?;
        }
        if !(self.conf_min > 0.0 && self.conf_min <= self.conf_max && self.conf_max <= 1.0) {
            return Err(SimulatorError::InvalidSpec(format!(
                "confidence range [{}, {}] must lie in (0, 1]",
                self.conf_min, self.conf_max
            )));
        }
        if !(0.0..=1.0).contains(&self.stick_probability) {
            return Err(SimulatorError::InvalidSpec(format!(
                "stick_probability must lie in [0, 1] (got {})",
                self.stick_probability
            )));
        }
        if !(self.stick_confidence > 0.0 && self.stick_confidence <= 1.0) {
            return Err(SimulatorError::InvalidSpec(format!(
                "stick_confidence must lie in (0, 1] (got {})",
                self.stick_confidence
            )));
        }
        Ok(())
    }

    pub(crate) fn draw_confidence(&self, rng: &mut impl Rng) -> f64 {
        if self.conf_min == self.conf_max {
            self.conf_min
        } else {
            rng.random_range(self.conf_min..=self.conf_max)
        }
    }
}

/// Ground truth for one keyframe handed to the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorInput {
    pub keyframe: u64,
    pub timestamp: f64,
    pub pose: RigidPose,
    /// World positions of the landmarks visible in this keyframe, by track id.
    pub cloud: Vec<(u32, Vector3<f64>)>,
}

/// Quantities known only to the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenTruth {
    pub index: usize,
    pub hidden_scale: f64,
    /// Metric extent used for normalisation (1 when disabled or degenerate).
    pub extent: f64,
    /// Predictor units per meter: `hidden_scale / extent`.
    pub units_per_meter: f64,
    pub first_cloud_bias: f64,
    pub last_cloud_bias: f64,
}

/// One prediction over `inputs`. Stateless given `hidden_scale` and `seed`.
pub fn simulate_predictor(
    index: usize,
    inputs: &[PredictorInput],
    model: &PredictorModel,
    hidden_scale: f64,
    dispatched_at: f64,
    seed: u64,
) -> Result<(SubGraph, HiddenTruth), SimulatorError> {
    model.validate()?;
    if inputs.len() != model.batch_size {
        return Err(SimulatorError::InvalidSpec(format!(
            "predictor batch has {} keyframes, expected {}",
            inputs.len(),
            model.batch_size
        )));
    }
    if !(hidden_scale > 0.0 && hidden_scale.is_finite()) {
        return Err(SimulatorError::InvalidSpec(format!(
            "hidden scale must be > 0 (got {hidden_scale})"
        )));
    }
    let mut rng = stream_rng(seed, 3);
    let origin = inputs[0].pose.inverse();
    let extent = inputs
        .iter()
        .map(|i| (i.pose.translation - inputs[0].pose.translation).norm())
        .fold(0.0, f64::max);
    let extent = if model.normalize && extent > 1e-9 {
        extent
    } else {
        1.0
    };
    let units = hidden_scale / extent;
    let rot = normal(model.rot_noise);
    let trans = normal(model.trans_noise);
    let mut poses = Vec::with_capacity(inputs.len());
    let mut confidences = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let rel = origin.compose(&input.pose);
        let mut pose = RigidPose::new(rel.rotation, rel.translation * units);
        if k > 0 {
            let dr = Vector3::from_fn(|_, _| rot.sample(&mut rng));
            let dt = Vector3::from_fn(|_, _| trans.sample(&mut rng));
            pose = RigidPose::new(pose.rotation.compose(&so3_exp(&dr)), pose.translation + dt);
        }
        poses.push(pose);
        confidences.push(model.draw_confidence(&mut rng));
    }
    let bias = normal(model.cloud_bias);
    let point_noise = normal(model.cloud_noise);
    let first_bias = bias.sample(&mut rng);
    let last_bias = bias.sample(&mut rng);
    let mut cloud = |input: &PredictorInput, b: f64| -> Vec<(u32, Vector3<f64>)> {
        let t_cw = input.pose.inverse();
        input
            .cloud
            .iter()
            .map(|(id, p)| {
                let f = units * (1.0 + b) * (1.0 + point_noise.sample(&mut rng));
                (*id, t_cw.transform_point(p) * f)
            })
            .collect()
    };
    let first_cloud = cloud(&inputs[0], first_bias);
    let last_cloud = cloud(&inputs[inputs.len() - 1], last_bias);
    let sub = SubGraph {
        index,
        keyframes: inputs.iter().map(|i| i.keyframe).collect(),
        timestamps: inputs.iter().map(|i| i.timestamp).collect(),
        poses,
        confidences,
        first_cloud,
        last_cloud,
        dispatched_at,
        deliver_at: dispatched_at + model.latency,
    };
    let hidden = HiddenTruth {
        index,
        hidden_scale,
        extent,
        units_per_meter: units,
        first_cloud_bias: first_bias,
        last_cloud_bias: last_bias,
    };
    Ok((sub, hidden))
}

/// Issues consecutive predictions with a drifting hidden scale.
#[derive(Debug, Clone)]
pub struct PredictorSimulator {
    model: PredictorModel,
    seed: u64,
    scales: Vec<f64>,
}

impl PredictorSimulator {
    pub fn new(model: PredictorModel, seed: u64) -> Result<Self, SimulatorError> {
        model.validate()?;
        Ok(Self {
            model,
            seed,
            scales: Vec::new(),
        })
    }

    pub fn model(&self) -> &PredictorModel {
        &self.model
    }

    /// Hidden scale of the `index`-th prediction.
    pub fn hidden_scale(&mut self, index: usize) -> f64 {
        while self.scales.len() <= index {
            let s = match self.scales.last() {
                None => self.model.scale,
                Some(prev) => {
                    let mut rng = stream_rng(self.seed, 4);
                    rng.set_word_pos(16 * self.scales.len() as u128);
                    prev * normal(self.model.scale_drift).sample(&mut rng).exp()
                }
            };
            self.scales.push(s);
        }
        self.scales[index]
    }

    pub fn predict(
        &mut self,
        index: usize,
        inputs: &[PredictorInput],
        dispatched_at: f64,
    ) -> Result<(SubGraph, HiddenTruth), SimulatorError> {
        let h = self.hidden_scale(index);
        let seed = self.seed.wrapping_add(1 + index as u64);
        simulate_predictor(index, inputs, &self.model, h, dispatched_at, seed)
    }
}
