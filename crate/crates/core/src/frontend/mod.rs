//! Per-frame tracking: motion prediction, tracker selection, outlier
//! rejection and pose estimation against the local map.

pub mod epipolar;
pub mod pnp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::Vector2;

use crate::backend::SolverError;
use crate::geometry::RigidPose;
use crate::uncertainty::TrackSource;

pub use epipolar::{
    decompose_essential, epipolar_ransac, estimate_fundamental, EpipolarMatch, RansacParams,
};
pub use pnp::{p3p_ransac, refine_pose_pnp, solve_p3p, PnpCorrespondence};

/// 95% quantile of the chi-square distribution with one degree of freedom.
pub const CHI2_1DOF_95: f64 = 3.841;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("not enough data: {got} correspondences, need {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("no consensus: best hypothesis has {inliers} inliers, need {need}")]
    ConsensusFailure { inliers: usize, need: usize },
    #[error("pose refinement failed: {0}")]
    RefinementFailure(String),
    #[error("tracking lost at frame {frame}: {reason}")]
    TrackingLost { frame: usize, reason: String },
}

impl From<SolverError> for FrontendError {
    fn from(e: SolverError) -> Self {
        FrontendError::RefinementFailure(e.to_string())
    }
}

/// The `[frontend]` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Switch to the robust tracker below this many tracked map points.
    pub tau: usize,
    /// Return to the primary tracker at or above this many.
    pub tau_recover: usize,
    pub ransac_confidence: f64,
    pub ransac_max_iters: usize,
    /// Huber threshold on the whitened reprojection error.
    pub huber_delta: f64,
    /// Fewest PnP inliers for a frame to count as tracked.
    pub min_inliers: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            tau: 50,
            tau_recover: 70,
            ransac_confidence: 0.99,
            ransac_max_iters: 500,
            huber_delta: 2.44,
            min_inliers: 12,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau_recover < self.tau {
            return Err(format!(
                "tau_recover ({}) must be at least tau ({})",
                self.tau_recover, self.tau
            ));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(format!(
                "ransac_confidence must lie in (0, 1) (got {})",
                self.ransac_confidence
            ));
        }
        if self.ransac_max_iters == 0 {
            return Err("ransac_max_iters must be positive".into());
        }
        if !(self.huber_delta > 0.0) {
            return Err(format!(
                "huber_delta must be positive (got {})",
                self.huber_delta
            ));
        }
        if self.min_inliers < 4 {
            return Err(format!(
                "min_inliers must be at least 4 (got {})",
                self.min_inliers
            ));
        }
        Ok(())
    }
}

/// One 2D measurement of a feature track in the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackMeasurement {
    pub track: u32,
    pub pixel: Vector2<f64>,
    /// Tracker confidence in `(0, 1]`; 1 for the primary tracker.
    pub confidence: f64,
    pub source: TrackSource,
}

/// Supplies per-frame feature tracks from either tracker. Track ids are
/// shared between the two sources so a track can change provider.
pub trait TrackProvider {
    fn frame_count(&self) -> usize;
    fn timestamp(&self, frame: usize) -> f64;
    fn primary(&mut self, frame: usize) -> Vec<TrackMeasurement>;
    fn robust(&mut self, frame: usize) -> Vec<TrackMeasurement>;
}

/// Which 2D tracker feeds the frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerMode {
    Primary,
    Robust,
}

/// Mode switching with hysteresis: drop to the robust tracker when fewer
/// than `tau` map points are tracked, return once at least `tau_recover` are.
pub fn select_tracker_mode(
    tracked: usize,
    tau: usize,
    tau_recover: usize,
    current: TrackerMode,
) -> TrackerMode {
    match current {
        TrackerMode::Primary if tracked < tau => TrackerMode::Robust,
        TrackerMode::Robust if tracked >= tau_recover => TrackerMode::Primary,
        mode => mode,
    }
}

/// Constant-velocity motion model over world-from-camera poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityModel {
    pub last_pose: RigidPose,
    pub last_timestamp: f64,
    /// Body-frame increment over the last interval, as an se(3) tangent.
    pub increment: [f64; 6],
    pub interval: f64,
}

impl VelocityModel {
    pub fn new(pose: RigidPose, timestamp: f64) -> Self {
        Self {
            last_pose: pose,
            last_timestamp: timestamp,
            increment: [0.0; 6],
            interval: 0.0,
        }
    }

    /// Pose at `timestamp`, scaling the last increment by the elapsed time.
    pub fn predict(&self, timestamp: f64) -> RigidPose {
        let dt = timestamp - self.last_timestamp;
        if !(self.interval > 0.0) || dt == 0.0 {
            return self.last_pose;
        }
        let f = dt / self.interval;
        let xi = self.increment.map(|v| v * f);
        self.last_pose.compose(&RigidPose::exp(&xi))
    }

    pub fn update(&mut self, pose: RigidPose, timestamp: f64) {
        let dt = timestamp - self.last_timestamp;
        if dt > 0.0 {
            self.increment = self.last_pose.inverse().compose(&pose).log();
            self.interval = dt;
        }
        self.last_pose = pose;
        self.last_timestamp = timestamp;
    }

    /// Replaces the latest pose without touching the velocity, e.g. after
    /// local BA refined the current keyframe.
    pub fn correct(&mut self, pose: RigidPose) {
        self.last_pose = pose;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector3;

    #[test]
    fn hysteresis_examples() {
        assert_eq!(
            select_tracker_mode(49, 50, 70, TrackerMode::Primary),
            TrackerMode::Robust
        );
        assert_eq!(
            select_tracker_mode(50, 50, 70, TrackerMode::Primary),
            TrackerMode::Primary
        );
        assert_eq!(
            select_tracker_mode(55, 50, 70, TrackerMode::Robust),
            TrackerMode::Robust
        );
        assert_eq!(
            select_tracker_mode(69, 50, 70, TrackerMode::Robust),
            TrackerMode::Robust
        );
        assert_eq!(
            select_tracker_mode(70, 50, 70, TrackerMode::Robust),
            TrackerMode::Primary
        );
    }

    #[test]
    fn constant_velocity_translation() {
        let mut v = VelocityModel::new(RigidPose::identity(), 0.0);
        v.update(
            RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            0.1,
        );
        let p = v.predict(0.2);
        assert!((p.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        let half = v.predict(0.15);
        assert!((half.translation - Vector3::new(1.5, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn constant_velocity_half_step_rotation() {
        let step = RigidPose::new(
            so3_exp(&Vector3::new(0.0, 0.2, 0.0)),
            Vector3::new(0.3, 0.0, 0.1),
        );
        let start = RigidPose::new(
            so3_exp(&Vector3::new(0.1, 0.0, 0.0)),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let mut v = VelocityModel::new(start, 1.0);
        v.update(start.compose(&step), 1.1);
        let half = v.predict(1.15);
        let applied = v.last_pose.inverse().compose(&half).log();
        let full = step.log();
        for i in 0..6 {
            assert!((applied[i] - 0.5 * full[i]).abs() < 1e-12);
        }
        assert_eq!(v.predict(1.1), v.last_pose);
    }
}
