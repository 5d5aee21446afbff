//! Simulated track providers: the robust tracker with boundary sticking and
//! tracking degradation events for the primary tracker.

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::predictor::PredictorModel;
use super::{normal, stream_rng, Scenario, SimulatorError};
use crate::frontend::{TrackMeasurement, TrackProvider};
use crate::uncertainty::TrackSource;

/// An interval during which each primary track survives with probability
/// `survival`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationEvent {
    pub start: f64,
    pub end: f64,
    pub survival: f64,
}

impl DegradationEvent {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if !(self.start < self.end) {
            return Err(SimulatorError::InvalidSpec(format!(
                "degradation interval [{}, {}] is empty",
                self.start, self.end
            )));
        }
        if !(self.survival > 0.0 && self.survival <= 1.0) {
            return Err(SimulatorError::InvalidSpec(format!(
                "survival fraction must lie in (0, 1] (got {})",
                self.survival
            )));
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Generator for an independent draw keyed by `key` inside `stream`.
fn keyed_rng(seed: u64, stream: u64, key: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(16 * key as u128);
    rng
}

/// Tracks surviving at time `t`. Each track survives independently with the
/// product of the fractions of all events covering `t`; the draw depends only
/// on `(seed, t, track)`.
pub fn apply_degradation(
    tracks: &[TrackMeasurement],
    events: &[DegradationEvent],
    t: f64,
    seed: u64,
) -> Vec<TrackMeasurement> {
    let survival: f64 = events
        .iter()
        .filter(|e| e.contains(t))
        .map(|e| e.survival)
        .product();
    if survival >= 1.0 {
        return tracks.to_vec();
    }
    let stream = 5 + t.to_bits();
    tracks
        .iter()
        .filter(|m| keyed_rng(seed, stream, m.track as u64).random::<f64>() < survival)
        .copied()
        .collect()
}

/// A robust-tracker measurement with its simulator bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustObservation {
    pub track: u32,
    pub landmark: u32,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
    /// The landmark has left the image and the pixel is clamped to the border.
    pub stuck: bool,
}

/// Robust-tracker output for `frame`. Visible landmarks get their exact
/// projection plus noise `pixel_noise / u`, with `u` drawn from the model's
/// confidence range. A landmark that left the image within the last
/// `stick_frames` frames is, with `stick_probability`, still reported at its
/// projection clamped `stick_offset` pixels inside the border, with its
/// confidence reduced by `stick_confidence`. Each draw is keyed by frame and
/// track, so the output does not depend on which other frames were queried.
pub fn simulate_robust_tracks(
    scenario: &Scenario,
    frame: usize,
    model: &PredictorModel,
    seed: u64,
) -> Vec<RobustObservation> {
    let k = scenario.world.intrinsics;
    let noise = normal(scenario.pixel_noise);
    let frame_stream = 6 + ((frame as u64) << 1);
    let mut out = Vec::new();
    for (&landmark, &track) in &scenario.frames[frame].visible {
        let mut rng = keyed_rng(seed, frame_stream, track as u64);
        let u = model.draw_confidence(&mut rng);
        let Some(exact) = scenario.exact_pixel(frame, landmark) else {
            continue;
        };
        let pixel = exact + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)) / u;
        if k.contains(&pixel) {
            out.push(RobustObservation {
                track,
                landmark,
                pixel,
                confidence: u,
                stuck: false,
            });
        }
    }
    if model.stick_probability > 0.0 {
        let off = model.stick_offset.min(0.5 * k.width.min(k.height));
        let first_exit = frame
            .saturating_sub(model.stick_frames.saturating_sub(1))
            .max(1);
        for exit in first_exit..=frame {
            let before = &scenario.frames[exit - 1].visible;
            for (&landmark, &track) in before {
                // still out of view from the exit frame up to now
                if (exit..=frame).any(|f| scenario.frames[f].visible.contains_key(&landmark)) {
                    continue;
                }
                let mut decide = keyed_rng(seed, 7 + ((exit as u64) << 1), landmark as u64);
                if decide.random::<f64>() >= model.stick_probability {
                    continue;
                }
                if scenario.depth(frame, landmark) <= super::MIN_DEPTH {
                    continue;
                }
                let Some(exact) = scenario.exact_pixel(frame, landmark) else {
                    continue;
                };
                let mut rng = keyed_rng(seed, frame_stream, track as u64);
                let u = model.draw_confidence(&mut rng);
                let noisy =
                    exact + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)) / u;
                let pixel = Vector2::new(
                    noisy.x.clamp(off, k.width - off),
                    noisy.y.clamp(off, k.height - off),
                );
                out.push(RobustObservation {
                    track,
                    landmark,
                    pixel,
                    confidence: u * model.stick_confidence,
                    stuck: true,
                });
            }
        }
    }
    out.sort_by_key(|o| o.track);
    out
}

/// Both trackers backed by one scenario. Degradation events apply to the
/// primary tracker only.
#[derive(Debug, Clone)]
pub struct SimulatedTracks<'a> {
    pub scenario: &'a Scenario,
    pub model: PredictorModel,
    pub events: Vec<DegradationEvent>,
    pub seed: u64,
}

impl<'a> SimulatedTracks<'a> {
    pub fn new(
        scenario: &'a Scenario,
        model: PredictorModel,
        events: Vec<DegradationEvent>,
        seed: u64,
    ) -> Self {
        Self {
            scenario,
            model,
            events,
            seed,
        }
    }
}

impl TrackProvider for SimulatedTracks<'_> {
    fn frame_count(&self) -> usize {
        self.scenario.frames.len()
    }

    fn timestamp(&self, frame: usize) -> f64 {
        self.scenario.frames[frame].timestamp
    }

    fn primary(&mut self, frame: usize) -> Vec<TrackMeasurement> {
        let f = &self.scenario.frames[frame];
        let all: Vec<TrackMeasurement> = f
            .observations
            .iter()
            .map(|o| TrackMeasurement {
                track: o.track,
                pixel: o.pixel,
                confidence: 1.0,
                source: TrackSource::Primary,
            })
            .collect();
        apply_degradation(&all, &self.events, f.timestamp, self.seed)
    }

    fn robust(&mut self, frame: usize) -> Vec<TrackMeasurement> {
        simulate_robust_tracks(self.scenario, frame, &self.model, self.seed)
            .into_iter()
            .map(|o| TrackMeasurement {
                track: o.track,
                pixel: o.pixel,
                confidence: o.confidence,
                source: TrackSource::Robust,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_scenario, TrajectorySpec, WorldSpec};

    fn scenario(noise: f64) -> Scenario {
        let world = WorldSpec {
            landmarks: 600,
            pixel_noise: noise,
            ..WorldSpec::default()
        };
        let traj = TrajectorySpec {
            duration: 3.0,
            ..TrajectorySpec::default()
        };
        generate_scenario(&world, &traj, 21).unwrap()
    }

    fn measurements(n: u32) -> Vec<TrackMeasurement> {
        (0..n)
            .map(|i| TrackMeasurement {
                track: i,
                pixel: Vector2::new(100.0, 100.0),
                confidence: 1.0,
                source: TrackSource::Primary,
            })
            .collect()
    }

    #[test]
    fn no_events_is_identity() {
        let m = measurements(50);
        assert_eq!(apply_degradation(&m, &[], 1.0, 0), m);
    }

    #[test]
    fn full_survival_is_identity() {
        let m = measurements(50);
        let e = [DegradationEvent {
            start: 0.0,
            end: 2.0,
            survival: 1.0,
        }];
        assert_eq!(apply_degradation(&m, &e, 1.0, 0), m);
    }

    #[test]
    fn outside_interval_all_survive() {
        let m = measurements(50);
        let e = [DegradationEvent {
            start: 0.0,
            end: 2.0,
            survival: 0.1,
        }];
        assert_eq!(apply_degradation(&m, &e, 2.5, 0), m);
    }

    #[test]
    fn survivor_count_follows_binomial() {
        // Binomial(500, 0.1): P(25 <= X <= 75) > 0.9999.
        let m = measurements(500);
        let e = [DegradationEvent {
            start: 0.0,
            end: 2.0,
            survival: 0.1,
        }];
        let mut inside = 0;
        let mut total = 0;
        for seed in 0..200 {
            let n = apply_degradation(&m, &e, 1.0, seed).len();
            total += n;
            if (25..=75).contains(&n) {
                inside += 1;
            }
        }
        assert!(inside as f64 / 200.0 >= 0.99);
        let mean = total as f64 / 200.0;
        assert!((mean - 50.0).abs() < 3.0, "{mean}");
    }

    #[test]
    fn degradation_is_order_independent() {
        let m = measurements(100);
        let e = [DegradationEvent {
            start: 0.0,
            end: 2.0,
            survival: 0.5,
        }];
        let mut rev = m.clone();
        rev.reverse();
        let mut a: Vec<u32> = apply_degradation(&m, &e, 0.5, 3)
            .iter()
            .map(|x| x.track)
            .collect();
        let mut b: Vec<u32> = apply_degradation(&rev, &e, 0.5, 3)
            .iter()
            .map(|x| x.track)
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_events_are_rejected() {
        assert!(DegradationEvent {
            start: 1.0,
            end: 1.0,
            survival: 0.5
        }
        .validate()
        .is_err());
        assert!(DegradationEvent {
            start: 0.0,
            end: 1.0,
            survival: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn no_sticking_gives_valid_projections() {
        let s = scenario(0.0);
        let model = PredictorModel {
            stick_probability: 0.0,
            ..PredictorModel::default()
        };
        for frame in 0..s.frames.len() {
            for o in simulate_robust_tracks(&s, frame, &model, 1) {
                assert!(!o.stuck);
                assert_eq!(o.pixel, s.exact_pixel(frame, o.landmark).unwrap());
                assert_eq!(s.frames[frame].visible[&o.landmark], o.track);
            }
        }
    }

    #[test]
    fn constant_confidence_model() {
        let s = scenario(1.0);
        let model = PredictorModel {
            conf_min: 1.0,
            conf_max: 1.0,
            ..PredictorModel::default()
        };
        let obs = simulate_robust_tracks(&s, 10, &model, 1);
        assert!(!obs.is_empty());
        assert!(obs.iter().all(|o| o.confidence == 1.0));
    }

    #[test]
    fn certain_sticking_clamps_to_exit_edge() {
        // The camera circles counter-clockwise looking outward, so landmarks
        // leave through the right edge of the image.
        let s = scenario(0.0);
        let model = PredictorModel {
            stick_probability: 1.0,
            ..PredictorModel::default()
        };
        let delta = 20.0;
        let mut stuck = 0;
        for frame in 1..s.frames.len() {
            for o in simulate_robust_tracks(&s, frame, &model, 4)
                .iter()
                .filter(|o| o.stuck)
            {
                let exact = s.exact_pixel(frame, o.landmark).unwrap();
                let w = s.world.intrinsics.width;
                if exact.x > w {
                    assert!(o.pixel.x > w - delta, "{}", o.pixel.x);
                    stuck += 1;
                }
                if exact.x < 0.0 {
                    assert!(o.pixel.x < delta, "{}", o.pixel.x);
                }
                assert!(o.confidence < 1.0);
                assert!(s.world.intrinsics.contains(&o.pixel));
            }
        }
        assert!(stuck > 0);
    }

    #[test]
    fn stuck_tracks_keep_their_id() {
        let s = scenario(0.0);
        let model = PredictorModel {
            stick_probability: 1.0,
            ..PredictorModel::default()
        };
        for frame in 1..s.frames.len() {
            for o in simulate_robust_tracks(&s, frame, &model, 4)
                .iter()
                .filter(|o| o.stuck)
            {
                let last_seen = (0..frame)
                    .rev()
                    .find(|f| s.frames[*f].visible.contains_key(&o.landmark))
                    .unwrap();
                assert!(frame - last_seen <= model.stick_frames);
                assert_eq!(s.frames[last_seen].visible[&o.landmark], o.track);
            }
        }
    }

    #[test]
    fn robust_tracks_are_reproducible() {
        let s = scenario(1.0);
        let model = PredictorModel {
            stick_probability: 0.5,
            ..PredictorModel::default()
        };
        assert_eq!(
            simulate_robust_tracks(&s, 12, &model, 8),
            simulate_robust_tracks(&s, 12, &model, 8)
        );
    }

    #[test]
    fn provider_degrades_primary_only() {
        let s = scenario(1.0);
        let events = vec![DegradationEvent {
            start: 0.0,
            end: 10.0,
            survival: 0.05,
        }];
        let mut p = SimulatedTracks::new(&s, PredictorModel::default(), events, 0);
        let primary = p.primary(5);
        let robust = p.robust(5);
        assert!(primary.len() * 5 < s.frames[5].observations.len());
        assert!(robust.len() * 10 > s.frames[5].visible.len() * 9);
        assert!(robust.iter().all(|m| m.source == TrackSource::Robust));
    }
}
