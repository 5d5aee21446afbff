//! TUM trajectory files: one `timestamp tx ty tz qx qy qz qw` line per pose,
//! whitespace separated, `#` starts a comment.
//!
//! Timestamps and quaternion components are written with nine decimals and
//! translations with nine significant digits. The written quaternion is chosen
//! so that normalising it on read reproduces the same text, which keeps
//! `write(read(write(x)))` byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::alignment::{AlignmentError, TrajectoryEntry, TrajectorySegment};
use crate::geometry::{RigidPose, Rotation};

#[derive(Debug, Error)]
pub enum TumError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Trajectory {
        path: PathBuf,
        #[source]
        source: AlignmentError,
    },
}

/// Parses TUM text. `origin` only labels error messages.
pub fn parse_tum(text: &str, origin: &Path) -> Result<TrajectorySegment, TumError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| TumError::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(format!("invalid number '{f}': {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value '{f}'")));
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(err("zero-norm quaternion".into()));
        }
        let pose = RigidPose::new(
            Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q)),
            Vector3::new(v[1], v[2], v[3]),
        );
        entries.push(TrajectoryEntry {
            id: entries.len() as u64,
            timestamp: v[0],
            pose,
        });
    }
    TrajectorySegment::new(entries).map_err(|source| TumError::Trajectory {
        path: origin.to_path_buf(),
        source,
    })
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<TrajectorySegment, TumError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TumError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tum(&text, path)
}

/// Formats `x` with nine significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.parse::<f64>() == Ok(0.0) {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

fn format_fixed9(x: f64) -> String {
    let s = format!("{x:.9}");
    if s.parse::<f64>() == Ok(0.0) {
        "0.000000000".to_string()
    } else {
        s
    }
}

fn quaternion_fields(rotation: &Rotation) -> [String; 4] {
    let mut q = rotation.to_quaternion().into_inner();
    let mut fields = [String::new(), String::new(), String::new(), String::new()];
    for _ in 0..8 {
        if q.w < 0.0 {
            q = -q;
        }
        let next = [q.i, q.j, q.k, q.w].map(format_fixed9);
        if next == fields {
            break;
        }
        let parsed: Vec<f64> = next.iter().map(|f| f.parse().unwrap_or(0.0)).collect();
        let reread = UnitQuaternion::from_quaternion(Quaternion::new(
            parsed[3], parsed[0], parsed[1], parsed[2],
        ));
        q = Rotation::from_quaternion(&reread)
            .to_quaternion()
            .into_inner();
        fields = next;
    }
    fields
}

pub fn format_tum(trajectory: &TrajectorySegment) -> String {
    let mut out = String::new();
    for e in trajectory.entries() {
        let t = e.pose.translation;
        let _ = write!(out, "{:.9}", e.timestamp);
        for v in [t.x, t.y, t.z] {
            out.push(' ');
            out.push_str(&format_sig9(v));
        }
        for f in quaternion_fields(&e.pose.rotation) {
            out.push(' ');
            out.push_str(&f);
        }
        out.push('\n');
    }
    out
}

pub fn write_tum(path: impl AsRef<Path>, trajectory: &TrajectorySegment) -> Result<(), TumError> {
    let path = path.as_ref();
    std::fs::write(path, format_tum(trajectory)).map_err(|source| TumError::Io {
        path: path.to_path_buf(),
        source,
    })
}
