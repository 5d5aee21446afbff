//! Synthetic worlds, camera trajectories, feature tracks and predictor
//! outputs with known ground truth.
//!
//! Landmarks lie on the inside wall of a vertical cylinder (z up). The camera
//! moves in the horizontal plane and looks sideways relative to its heading,
//! which keeps the wall in view and gives steady parallax. Every output is a
//! pure function of its specs and seed.

pub mod predictor;
pub mod tracks;

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{TrajectoryEntry, TrajectorySegment};
use crate::geometry::{project, CameraIntrinsics, RigidPose, Rotation};

pub use predictor::{
    simulate_predictor, HiddenTruth, PredictorInput, PredictorModel, PredictorSimulator,
};
pub use tracks::{
    apply_degradation, simulate_robust_tracks, DegradationEvent, RobustObservation, SimulatedTracks,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("invalid simulator spec: {0}")]
    InvalidSpec(String),
}

/// Closer landmarks are not reported.
pub const MIN_DEPTH: f64 = 0.1;

/// Seeded generator on its own ChaCha stream, so different consumers of one
/// seed never share random draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative")
}

fn check_sigma(name: &str, v: f64) -> Result<(), SimulatorError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SimulatorError::InvalidSpec(format!(
            "{name} must be >= 0 (got {v})"
        )))
    }
}

/// The `[world]` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub landmarks: usize,
    /// Cylinder radius in meters.
    pub radius: f64,
    /// Landmarks span `[-half_height, half_height]` vertically.
    pub half_height: f64,
    /// Uniform radial jitter in meters.
    pub jitter: f64,
    /// Isotropic Gaussian pixel noise of the primary tracker.
    pub pixel_noise: f64,
    pub camera: CameraIntrinsics,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            landmarks: 1500,
            radius: 8.0,
            half_height: 2.0,
            jitter: 0.3,
            pixel_noise: 1.0,
            camera: CameraIntrinsics::default(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.landmarks == 0 {
            return Err(SimulatorError::InvalidSpec(
                "world needs at least one landmark".into(),
            ));
        }
        if !(self.radius > 0.0 && self.half_height > 0.0) {
            return Err(SimulatorError::InvalidSpec(
                "world radius and half_height must be positive".into(),
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter < self.radius) {
            return Err(SimulatorError::InvalidSpec(format!(
                "jitter must lie in [0, radius) (got {})",
                self.jitter
            )));
        }
        check_sigma("pixel_noise", self.pixel_noise)?;
        self.camera
            .validate()
            .map_err(|e| SimulatorError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub landmarks: Vec<Vector3<f64>>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn generate(spec: &WorldSpec, seed: u64) -> Result<Self, SimulatorError> {
        spec.validate()?;
        let mut rng = stream_rng(seed, 0);
        let landmarks = (0..spec.landmarks)
            .map(|_| {
                let theta = rng.random_range(0.0..TAU);
                let r = spec.radius + rng.random_range(-1.0..=1.0) * spec.jitter;
                let z = rng.random_range(-spec.half_height..=spec.half_height);
                Vector3::new(r * theta.cos(), r * theta.sin(), z)
            })
            .collect();
        Ok(Self {
            landmarks,
            intrinsics: spec.camera,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryShape {
    Circle,
    FigureEight,
    Straight,
    RandomWalk,
}

/// The `[trajectory]` configuration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub shape: TrajectoryShape,
    pub duration: f64,
    /// Frame rate in Hz.
    pub rate: f64,
    /// Nominal speed in m/s.
    pub speed: f64,
    /// Path radius of the circle and half-width of the figure-eight.
    pub radius: f64,
    /// Viewing direction relative to the heading, counter-clockwise positive.
    pub look_yaw_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            shape: TrajectoryShape::Circle,
            duration: 20.0,
            rate: 20.0,
            speed: 1.0,
            radius: 4.0,
            look_yaw_deg: -90.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(SimulatorError::InvalidSpec(format!(
                "frame rate must be > 0 (got {})",
                self.rate
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimulatorError::InvalidSpec(format!(
                "duration must be > 0 (got {})",
                self.duration
            )));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(SimulatorError::InvalidSpec(format!(
                "speed must be >= 0 (got {})",
                self.speed
            )));
        }
        if !(self.radius > 0.0) {
            return Err(SimulatorError::InvalidSpec(format!(
                "path radius must be > 0 (got {})",
                self.radius
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.rate + 1e-9).floor() as usize + 1
    }
}

/// World-from-camera pose of a camera at `position` looking horizontally
/// along `yaw`, image y pointing down.
pub fn looking_pose(position: Vector3<f64>, yaw: f64) -> RigidPose {
    let z = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let y = Vector3::new(0.0, 0.0, -1.0);
    let x = y.cross(&z);
    RigidPose::new(
        Rotation::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])),
        position,
    )
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Ground-truth camera poses, frame `k` at time `k / rate`.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    seed: u64,
) -> Result<TrajectorySegment, SimulatorError> {
    spec.validate()?;
    let n = spec.frame_count();
    let dt = 1.0 / spec.rate;
    let look = spec.look_yaw_deg.to_radians();
    let mut rng = stream_rng(seed, 1);
    let (mut pos, mut heading, mut yaw_rate) = (Vector3::<f64>::zeros(), 0.0_f64, 0.0_f64);
    let mut entries = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / spec.rate;
        let (p, h) = match spec.shape {
            TrajectoryShape::Circle => {
                let theta = spec.speed * t / spec.radius;
                (
                    Vector3::new(spec.radius * theta.cos(), spec.radius * theta.sin(), 0.0),
                    theta + PI / 2.0,
                )
            }
            TrajectoryShape::FigureEight => {
                let a = spec.radius;
                let phi = spec.speed * t / a;
                (
                    Vector3::new(a * phi.sin(), a * phi.sin() * phi.cos(), 0.0),
                    (2.0 * phi).cos().atan2(phi.cos()),
                )
            }
            TrajectoryShape::Straight => {
                let half = 0.5 * spec.speed * spec.duration;
                (Vector3::new(-half + spec.speed * t, 0.0, 0.0), 0.0)
            }
            TrajectoryShape::RandomWalk => {
                if k > 0 {
                    let steer = if pos.norm() > spec.radius {
                        0.5 * wrap_angle((-pos.y).atan2(-pos.x) - heading)
                    } else {
                        0.0
                    };
                    yaw_rate = 0.95 * yaw_rate + normal(0.2).sample(&mut rng) + steer;
                    heading += yaw_rate * dt;
                    pos += spec.speed * dt * Vector3::new(heading.cos(), heading.sin(), 0.0);
                }
                (pos, heading)
            }
        };
        entries.push(TrajectoryEntry {
            id: k as u64,
            timestamp: t,
            pose: looking_pose(p, h + look),
        });
    }
    TrajectorySegment::new(entries).map_err(|e| SimulatorError::InvalidSpec(e.to_string()))
}

/// A noisy primary-tracker measurement of one landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub track: u32,
    pub landmark: u32,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub index: usize,
    pub timestamp: f64,
    /// Landmarks inside the field of view, with the track id each one has in
    /// this frame. A landmark that leaves the view and returns gets a new id.
    pub visible: BTreeMap<u32, u32>,
    /// Noisy observations sorted by track id. Observations pushed outside the
    /// image by noise are dropped.
    pub observations: Vec<LandmarkObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub world: SyntheticWorld,
    pub ground_truth: TrajectorySegment,
    pub frames: Vec<FrameObservations>,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn pose(&self, frame: usize) -> RigidPose {
        self.ground_truth.entries()[frame].pose
    }

    /// Noise-free pixel of a landmark in a frame, if it is in front of the
    /// camera.
    pub fn exact_pixel(&self, frame: usize, landmark: u32) -> Option<Vector2<f64>> {
        project(
            &self.world.intrinsics,
            &self.pose(frame).inverse(),
            &self.world.landmarks[landmark as usize],
        )
        .ok()
    }

    pub fn depth(&self, frame: usize, landmark: u32) -> f64 {
        self.pose(frame)
            .inverse()
            .transform_point(&self.world.landmarks[landmark as usize])
            .z
    }

    /// World position of the landmark behind a track visible in `frame`.
    pub fn track_landmark(&self, frame: usize, track: u32) -> Option<u32> {
        self.frames[frame]
            .visible
            .iter()
            .find_map(|(l, t)| (*t == track).then_some(*l))
    }
}

/// Renders the world along the trajectory with FOV and depth culling and
/// Gaussian pixel noise.
pub fn generate_scenario(
    world: &WorldSpec,
    trajectory: &TrajectorySpec,
    seed: u64,
) -> Result<Scenario, SimulatorError> {
    let synthetic = SyntheticWorld::generate(world, seed)?;
    let ground_truth = generate_trajectory(trajectory, seed)?;
    let limit = world.radius - world.jitter - MIN_DEPTH;
    if let Some(e) = ground_truth
        .entries()
        .iter()
        .find(|e| e.pose.translation.xy().norm() >= limit)
    {
        return Err(SimulatorError::InvalidSpec(format!(
            "trajectory leaves the world at t = {:.3} s",
            e.timestamp
        )));
    }
    render_scenario(synthetic, ground_truth, world.pixel_noise, seed)
}

/// Renders an arbitrary ground-truth trajectory through `world`.
pub fn render_scenario(
    world: SyntheticWorld,
    ground_truth: TrajectorySegment,
    pixel_noise: f64,
    seed: u64,
) -> Result<Scenario, SimulatorError> {
    check_sigma("pixel_noise", pixel_noise)?;
    let k = world.intrinsics;
    let noise = normal(pixel_noise);
    let mut rng = stream_rng(seed, 2);
    let mut next_track = 0u32;
    let mut previous: BTreeMap<u32, u32> = BTreeMap::new();
    let mut frames = Vec::with_capacity(ground_truth.len());
    for (index, entry) in ground_truth.entries().iter().enumerate() {
        let t_cw = entry.pose.inverse();
        let mut visible = BTreeMap::new();
        let mut observations = Vec::new();
        for (l, p) in world.landmarks.iter().enumerate() {
            let l = l as u32;
            let pc = t_cw.transform_point(p);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let Ok(pixel) = k.project_camera(&pc) else {
                continue;
            };
            if !k.contains(&pixel) {
                continue;
            }
            let track = match previous.get(&l) {
                Some(t) => *t,
                None => {
                    next_track += 1;
                    next_track
                }
            };
            visible.insert(l, track);
            let noisy = pixel + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            if k.contains(&noisy) {
                observations.push(LandmarkObservation {
                    track,
                    landmark: l,
                    pixel: noisy,
                });
            }
        }
        observations.sort_by_key(|o| o.track);
        previous = visible.clone();
        frames.push(FrameObservations {
            index,
            timestamp: entry.timestamp,
            visible,
            observations,
        });
    }
    Ok(Scenario {
        world,
        ground_truth,
        frames,
        pixel_noise,
        seed,
    })
}
