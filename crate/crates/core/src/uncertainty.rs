//! Adaptive, edge-aware measurement noise.
//!
//! A feature's noise scale is `sigma = sigma_b * eta(p) / u`, where `u` is the
//! tracker confidence and `eta` multiplies by `k_p` inside a margin `delta`
//! of the image border. The resulting isotropic covariance feeds both the
//! frontend PnP and the backend bundle adjustment.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("confidence {0} outside (0, 1]")]
    InvalidConfidence(f64),
    #[error("pixel ({x}, {y}) outside image bounds {width}x{height}")]
    InvalidObservation {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    #[error("invalid noise config: {0}")]
    InvalidConfig(String),
}

/// Noise model parameters. Config keys `noise.sigma_b`, `noise.k_p`,
/// `noise.delta` (pixels, dimensionless, pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_b: f64,
    pub k_p: f64,
    pub delta: f64,
    /// When false, `edge_penalty` always returns 1 (ablation switch).
    pub edge_penalty: bool,
    #[serde(skip)]
    pub width: f64,
    #[serde(skip)]
    pub height: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_b: 1.0,
            k_p: 10.0,
            delta: 20.0,
            edge_penalty: true,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl NoiseConfig {
    pub fn with_bounds(mut self, width: f64, height: f64) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        if !(self.sigma_b > 0.0) {
            return Err(UncertaintyError::InvalidConfig(format!(
                "sigma_b must be > 0 (got {})",
                self.sigma_b
            )));
        }
        if !(self.k_p >= 1.0) {
            return Err(UncertaintyError::InvalidConfig(format!(
                "k_p must be >= 1 (got {})",
                self.k_p
            )));
        }
        if !(self.delta >= 0.0 && self.delta < self.width.min(self.height) / 2.0) {
            return Err(UncertaintyError::InvalidConfig(format!(
                "delta must lie in [0, min(width, height)/2) (got {})",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Which tracker produced an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrackSource {
    Primary,
    Robust,
}

/// A 2D feature measurement with its adaptive noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pixel: Vector2<f64>,
    pub confidence: f64,
    pub source: TrackSource,
    pub sigma: f64,
}

impl Observation {
    /// Primary-tracker observations carry no predictor confidence, so `u = 1`.
    pub fn primary(pixel: Vector2<f64>, config: &NoiseConfig) -> Result<Self, UncertaintyError> {
        let sigma = adaptive_sigma(1.0, &pixel, config)?;
        Ok(Self {
            pixel,
            confidence: 1.0,
            source: TrackSource::Primary,
            sigma,
        })
    }

    pub fn robust(
        pixel: Vector2<f64>,
        confidence: f64,
        config: &NoiseConfig,
    ) -> Result<Self, UncertaintyError> {
        let sigma = adaptive_sigma(confidence, &pixel, config)?;
        Ok(Self {
            pixel,
            confidence,
            source: TrackSource::Robust,
            sigma,
        })
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        observation_covariance(self.sigma)
    }

    /// Information weight `1 / sigma^2` of either axis.
    pub fn information(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

/// Minimum pixel distance to any of the four image edges.
pub fn boundary_distance(pixel: &Vector2<f64>, width: f64, height: f64) -> f64 {
    pixel
        .x
        .min(width - pixel.x)
        .min(pixel.y)
        .min(height - pixel.y)
}

/// `k_p` strictly inside the border margin, 1 elsewhere.
pub fn edge_penalty(pixel: &Vector2<f64>, config: &NoiseConfig) -> Result<f64, UncertaintyError> {
    let inside =
        pixel.x >= 0.0 && pixel.x <= config.width && pixel.y >= 0.0 && pixel.y <= config.height;
    if !inside || !pixel.iter().all(|v| v.is_finite()) {
        return Err(UncertaintyError::InvalidObservation {
            x: pixel.x,
            y: pixel.y,
            width: config.width,
            height: config.height,
        });
    }
    if config.edge_penalty && boundary_distance(pixel, config.width, config.height) < config.delta {
        Ok(config.k_p)
    } else {
        Ok(1.0)
    }
}

pub fn adaptive_sigma(
    confidence: f64,
    pixel: &Vector2<f64>,
    config: &NoiseConfig,
) -> Result<f64, UncertaintyError> {
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(UncertaintyError::InvalidConfidence(confidence));
    }
    Ok(config.sigma_b * edge_penalty(pixel, config)? / confidence)
}

pub fn observation_covariance(sigma: f64) -> Matrix2<f64> {
    Matrix2::from_diagonal_element(sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> NoiseConfig {
        NoiseConfig::default().with_bounds(640.0, 480.0)
    }

    #[test]
    fn penalty_interior_and_border() {
        let c = cfg();
        assert_eq!(edge_penalty(&Vector2::new(320.0, 240.0), &c).unwrap(), 1.0);
        assert_eq!(edge_penalty(&Vector2::new(2.0, 240.0), &c).unwrap(), 10.0);
        // Exactly delta from the edge is not inside the margin.
        assert_eq!(edge_penalty(&Vector2::new(20.0, 240.0), &c).unwrap(), 1.0);
        assert_eq!(edge_penalty(&Vector2::new(620.0, 240.0), &c).unwrap(), 1.0);
        assert_eq!(edge_penalty(&Vector2::new(320.0, 479.0), &c).unwrap(), 10.0);
    }

    #[test]
    fn penalty_rejects_outside_pixel() {
        assert!(matches!(
            edge_penalty(&Vector2::new(-1.0, 10.0), &cfg()),
            Err(UncertaintyError::InvalidObservation { .. })
        ));
    }

    #[test]
    fn sigma_examples() {
        let c = cfg();
        let interior = Vector2::new(320.0, 240.0);
        let border = Vector2::new(2.0, 240.0);
        assert_eq!(adaptive_sigma(1.0, &interior, &c).unwrap(), 1.0);
        assert_eq!(adaptive_sigma(0.5, &interior, &c).unwrap(), 2.0);
        assert_eq!(adaptive_sigma(0.5, &border, &c).unwrap(), 20.0);
        assert!(matches!(
            adaptive_sigma(0.0, &interior, &c),
            Err(UncertaintyError::InvalidConfidence(_))
        ));
        assert!(adaptive_sigma(1.01, &interior, &c).is_err());
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(observation_covariance(1.0), Matrix2::identity());
        assert_eq!(observation_covariance(2.0), Matrix2::identity() * 4.0);
        let s = adaptive_sigma(0.25, &Vector2::new(320.0, 240.0), &cfg()).unwrap();
        assert_eq!(observation_covariance(s), Matrix2::identity() * 16.0);
    }

    #[test]
    fn primary_observations_have_unit_confidence() {
        let o = Observation::primary(Vector2::new(100.0, 100.0), &cfg()).unwrap();
        assert_eq!(o.confidence, 1.0);
        assert_eq!(o.source, TrackSource::Primary);
    }

    #[test]
    fn disabled_penalty_is_one() {
        let mut c = cfg();
        c.edge_penalty = false;
        assert_eq!(edge_penalty(&Vector2::new(1.0, 1.0), &c).unwrap(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.k_p = 0.5;
        assert!(c.validate().is_err());
        c = cfg();
        c.delta = 240.0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn sigma_monotone(u1 in 0.01..1.0f64, u2 in 0.01..1.0f64, k1 in 1.0..50.0f64, k2 in 1.0..50.0f64,
                          x in 0.0..640.0f64, y in 0.0..480.0f64) {
            let p = Vector2::new(x, y);
            let mut c = cfg();
            let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
            prop_assert!(adaptive_sigma(lo, &p, &c).unwrap() >= adaptive_sigma(hi, &p, &c).unwrap());
            let (klo, khi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            c.k_p = klo;
            let s_lo = adaptive_sigma(u1, &p, &c).unwrap();
            c.k_p = khi;
            prop_assert!(adaptive_sigma(u1, &p, &c).unwrap() >= s_lo);
        }

        #[test]
        fn border_weight_ratio(u in 0.05..1.0f64, kp in 1.0..100.0f64) {
            let mut c = cfg();
            c.k_p = kp;
            let inner = Observation::robust(Vector2::new(320.0, 240.0), u, &c).unwrap();
            let edge = Observation::robust(Vector2::new(3.0, 240.0), u, &c).unwrap();
            let ratio = edge.information() / inner.information();
            prop_assert!((ratio - 1.0 / (kp * kp)).abs() <= 1e-12 * (1.0 / (kp * kp)).max(1.0));
        }
    }
}
