//! The single TOML configuration file shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendConfig;
use crate::frontend::FrontendConfig;
use crate::simulator::{DegradationEvent, PredictorModel, TrajectorySpec, WorldSpec};
use crate::uncertainty::NoiseConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{}: {message}", location(path, *line))]
    Invalid {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn location(path: &Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{l}", path.display()),
        None => path.display().to_string(),
    }
}

/// The `[degradation]` section: a list of `events`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub events: Vec<DegradationEvent>,
}

/// The `[keyframe]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframePolicy {
    /// New keyframe when the median track displacement since the last
    /// keyframe exceeds this many pixels.
    pub parallax_px: f64,
    /// New keyframe when fewer than this fraction of the last keyframe's map
    /// points are still tracked.
    pub min_tracked_ratio: f64,
    /// Smallest ray angle accepted when triangulating new points.
    pub min_triangulation_deg: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            parallax_px: 10.0,
            min_tracked_ratio: 0.5,
            min_triangulation_deg: 2.0,
        }
    }
}

/// The `[pipeline]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineFlags {
    /// Run the asynchronous predictor and the scale-aware pose graph.
    pub enable_pgo: bool,
    /// Allow switching to the robust tracker.
    pub enable_robust: bool,
    /// Log-scale random walk applied to newly triangulated points at every
    /// keyframe, injecting scale drift into the VO map.
    pub drift: f64,
    /// Bootstrap needs this many tracks shared with the first frame.
    pub bootstrap_min_tracks: usize,
    /// Bootstrap needs this median displacement in pixels.
    pub bootstrap_min_disparity: f64,
    /// Give up and restart the bootstrap after this many frames.
    pub bootstrap_max_frames: usize,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        Self {
            enable_pgo: true,
            enable_robust: true,
            drift: 0.0,
            bootstrap_min_tracks: 50,
            bootstrap_min_disparity: 40.0,
            bootstrap_max_frames: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    pub predictor: PredictorModel,
    pub degradation: DegradationConfig,
    pub noise: NoiseConfig,
    pub frontend: FrontendConfig,
    pub backend: BackendConfig,
    pub keyframe: KeyframePolicy,
    pub pipeline: PipelineFlags,
}

impl PipelineConfig {
    /// Parses and validates a configuration. `origin` labels errors.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid {
            path: origin.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        config.validate().map_err(|message| ConfigError::Invalid {
            path: origin.to_path_buf(),
            line: None,
            message,
        })?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Noise model bound to the configured image size.
    pub fn noise_model(&self) -> NoiseConfig {
        self.noise
            .with_bounds(self.world.camera.width, self.world.camera.height)
    }

    pub fn validate(&self) -> Result<(), String> {
        fn tag(section: &'static str) -> impl Fn(String) -> String {
            move |e| format!("[{section}] {e}")
        }
        self.world
            .validate()
            .map_err(|e| tag("world")(e.to_string()))?;
        self.trajectory
            .validate()
            .map_err(|e| tag("trajectory")(e.to_string()))?;
        self.predictor
            .validate()
            .map_err(|e| tag("predictor")(e.to_string()))?;
        for e in &self.degradation.events {
            e.validate()
                .map_err(|e| tag("degradation")(e.to_string()))?;
        }
        self.noise_model()
            .validate()
            .map_err(|e| tag("noise")(e.to_string()))?;
        self.frontend.validate().map_err(tag("frontend"))?;
        self.backend.validate().map_err(tag("backend"))?;
        let k = &self.keyframe;
        if !(k.parallax_px > 0.0
            && (0.0..=1.0).contains(&k.min_tracked_ratio)
            && k.min_triangulation_deg >= 0.0)
        {
            return Err("[keyframe] parallax_px must be > 0, min_tracked_ratio in [0, 1], min_triangulation_deg >= 0".into());
        }
        let p = &self.pipeline;
        if !(p.drift >= 0.0 && p.drift.is_finite()) {
            return Err(format!("[pipeline] drift must be >= 0 (got {})", p.drift));
        }
        if p.bootstrap_min_tracks < 8 {
            return Err("[pipeline] bootstrap_min_tracks must be at least 8".into());
        }
        if p.bootstrap_max_frames < 2 {
            return Err("[pipeline] bootstrap_max_frames must be at least 2".into());
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}
