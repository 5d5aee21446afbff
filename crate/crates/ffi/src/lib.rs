//! C ABI over the hybrid-vo engine.
//!
//! Every function returns an [`HvoStatus`]. On failure a message for the
//! calling thread is available through [`hvo_last_error_message`]. Handles
//! are opaque and must be released with the matching `_free` function.
//! Panics never cross the boundary; they are reported as
//! [`HvoStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hybrid_vo::alignment::{ate_rmse, umeyama_sim3, AlignMode, TrajectoryEntry, TrajectorySegment};
use hybrid_vo::geometry::{RigidPose, Rotation};
use hybrid_vo::pipeline::{run_config, PipelineConfig, PipelineError, RunOptions, RunOutput};
use hybrid_vo::uncertainty::{adaptive_sigma, NoiseConfig};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    TrackingLost = 4,
    Degenerate = 5,
    NotRun = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

/// One timestamped world-from-camera pose, quaternion in Hamilton order
/// with the scalar last as in TUM files.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HvoPose {
    pub timestamp: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

/// `x -> scale * R * x + t` with `R` row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HvoSim3 {
    pub scale: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Which trajectory to read from a finished run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvoTrajectory {
    /// One pose per processed frame.
    HighFrequency = 0,
    /// One pose per keyframe after pose-graph optimisation.
    Optimized = 1,
    GroundTruth = 2,
}

/// Alignment applied before computing ATE.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvoAlignMode {
    Sim3 = 0,
    Se3 = 1,
    None = 2,
}

/// Opaque pipeline handle: a validated configuration and, once run, its
/// outputs.
pub struct HvoPipeline {
    config: PipelineConfig,
    output: Option<RunOutput>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
}

fn fail(status: HvoStatus, message: impl Into<String>) -> HvoStatus {
    set_error(message);
    status
}

fn guard(f: impl FnOnce() -> HvoStatus) -> HvoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(HvoStatus::Panic, "internal panic"),
    }
}

fn to_pose(p: &HvoPose) -> Result<(f64, RigidPose), HvoStatus> {
    let q = Quaternion::new(p.qw, p.qx, p.qy, p.qz);
    let values = [p.timestamp, p.tx, p.ty, p.tz, p.qx, p.qy, p.qz, p.qw];
    if values.iter().any(|v| !v.is_finite()) || q.norm() < 1e-12 {
        return Err(fail(HvoStatus::InvalidArgument, "pose has non-finite values or a zero quaternion"));
    }
    let rotation = Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q));
    Ok((p.timestamp, RigidPose::new(rotation, Vector3::new(p.tx, p.ty, p.tz))))
}

fn from_pose(timestamp: f64, pose: &RigidPose) -> HvoPose {
    let q = pose.rotation.to_quaternion();
    HvoPose {
        timestamp,
        tx: pose.translation.x,
        ty: pose.translation.y,
        tz: pose.translation.z,
        qx: q.i,
        qy: q.j,
        qz: q.k,
        qw: q.w,
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Result<&'a [T], HvoStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(HvoStatus::NullPointer, "null array pointer"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn segment(poses: *const HvoPose, len: usize) -> Result<TrajectorySegment, HvoStatus> {
    let poses = slice(poses, len)?;
    let parsed = poses.iter().map(to_pose).collect::<Result<Vec<_>, _>>()?;
    TrajectorySegment::new(
        parsed
            .into_iter()
            .enumerate()
            .map(|(i, (timestamp, pose))| TrajectoryEntry {
                id: i as u64,
                timestamp,
                pose,
            })
            .collect(),
    )
    .map_err(|e| fail(HvoStatus::InvalidArgument, e.to_string()))
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `capacity`. Returns the full message length in bytes,
/// excluding the terminator.
///
/// # Safety
/// `buffer` must be null or writable for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn hvo_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buffer.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a pipeline from TOML configuration text. `seed` overrides the
/// configured seed when `override_seed` is non-zero.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hvo_pipeline_create(
    config_toml: *const c_char,
    seed: u64,
    override_seed: i32,
    out: *mut *mut HvoPipeline,
) -> HvoStatus {
    guard(|| {
        if config_toml.is_null() || out.is_null() {
            return fail(HvoStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
            return fail(HvoStatus::InvalidArgument, "configuration is not UTF-8");
        };
        let mut config = match PipelineConfig::from_toml(text, Path::new("<ffi>")) {
            Ok(c) => c,
            Err(e) => return fail(HvoStatus::Config, e.to_string()),
        };
        if override_seed != 0 {
            config.seed = seed;
        }
        *out = Box::into_raw(Box::new(HvoPipeline { config, output: None }));
        HvoStatus::Ok
    })
}

/// Simulates the configured scenario and runs the pipeline over it in
/// deterministic mode. A lost track returns [`HvoStatus::TrackingLost`];
/// the trajectories up to that point remain readable.
///
/// # Safety
/// `pipeline` must come from [`hvo_pipeline_create`].
#[no_mangle]
pub unsafe extern "C" fn hvo_pipeline_run(pipeline: *mut HvoPipeline) -> HvoStatus {
    guard(|| {
        let Some(p) = pipeline.as_mut() else {
            return fail(HvoStatus::NullPointer, "null pipeline");
        };
        match run_config(&p.config, RunOptions { deterministic: true }) {
            Ok(out) => {
                let lost = out.error.as_ref().map(|e| e.to_string());
                p.output = Some(out);
                match lost {
                    Some(m) => fail(HvoStatus::TrackingLost, m),
                    None => HvoStatus::Ok,
                }
            }
            Err(PipelineError::Config(m)) => fail(HvoStatus::Config, m),
            Err(e) => fail(HvoStatus::Internal, e.to_string()),
        }
    })
}

fn trajectory(out: &RunOutput, which: HvoTrajectory) -> Vec<HvoPose> {
    match which {
        HvoTrajectory::HighFrequency => out.highfreq.iter().map(|e| from_pose(e.timestamp, &e.pose)).collect(),
        HvoTrajectory::Optimized => out.optimized.iter().map(|(_, t, p)| from_pose(*t, p)).collect(),
        HvoTrajectory::GroundTruth => out
            .ground_truth
            .entries()
            .iter()
            .map(|e| from_pose(e.timestamp, &e.pose))
            .collect(),
    }
}

/// Number of poses in a trajectory of a finished run.
///
/// # Safety
/// `pipeline` must come from [`hvo_pipeline_create`] and `len` be writable.
#[no_mangle]
pub unsafe extern "C" fn hvo_pipeline_trajectory_len(
    pipeline: *const HvoPipeline,
    which: HvoTrajectory,
    len: *mut usize,
) -> HvoStatus {
    guard(|| {
        let (Some(p), false) = (pipeline.as_ref(), len.is_null()) else {
            return fail(HvoStatus::NullPointer, "null argument");
        };
        let Some(out) = &p.output else {
            return fail(HvoStatus::NotRun, "pipeline has not been run");
        };
        *len = trajectory(out, which).len();
        HvoStatus::Ok
    })
}

/// Copies a trajectory of a finished run into `poses`. `written` receives
/// the number of poses copied.
///
/// # Safety
/// `poses` must be writable for `capacity` elements and `written` writable.
#[no_mangle]
pub unsafe extern "C" fn hvo_pipeline_trajectory_copy(
    pipeline: *const HvoPipeline,
    which: HvoTrajectory,
    poses: *mut HvoPose,
    capacity: usize,
    written: *mut usize,
) -> HvoStatus {
    guard(|| {
        let (Some(p), false) = (pipeline.as_ref(), written.is_null()) else {
            return fail(HvoStatus::NullPointer, "null argument");
        };
        let Some(out) = &p.output else {
            return fail(HvoStatus::NotRun, "pipeline has not been run");
        };
        let t = trajectory(out, which);
        *written = 0;
        if t.len() > capacity {
            return fail(
                HvoStatus::BufferTooSmall,
                format!("trajectory has {} poses, buffer holds {capacity}", t.len()),
            );
        }
        if !t.is_empty() {
            if poses.is_null() {
                return fail(HvoStatus::NullPointer, "null pose buffer");
            }
            ptr::copy_nonoverlapping(t.as_ptr(), poses, t.len());
        }
        *written = t.len();
        HvoStatus::Ok
    })
}

/// Copies the run's metrics as `key=value` lines, NUL-terminated.
/// `needed` receives the full length in bytes excluding the terminator.
///
/// # Safety
/// `buffer` must be null or writable for `capacity` bytes; `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn hvo_pipeline_metrics(
    pipeline: *const HvoPipeline,
    buffer: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> HvoStatus {
    guard(|| {
        let (Some(p), false) = (pipeline.as_ref(), needed.is_null()) else {
            return fail(HvoStatus::NullPointer, "null argument");
        };
        let Some(out) = &p.output else {
            return fail(HvoStatus::NotRun, "pipeline has not been run");
        };
        let text = out.metrics.to_key_value();
        *needed = text.len();
        if buffer.is_null() || capacity <= text.len() {
            return fail(HvoStatus::BufferTooSmall, format!("metrics need {} bytes", text.len() + 1));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buffer.cast::<u8>(), text.len());
        *buffer.add(text.len()) = 0;
        HvoStatus::Ok
    })
}

/// Releases a pipeline. Null is ignored.
///
/// # Safety
/// `pipeline` must come from [`hvo_pipeline_create`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn hvo_pipeline_free(pipeline: *mut HvoPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Least-squares similarity taking `src` onto `dst`; both hold `n` points
/// as packed xyz triples.
///
/// # Safety
/// `src` and `dst` must be readable for `3 * n` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hvo_umeyama(src: *const f64, dst: *const f64, n: usize, out: *mut HvoSim3) -> HvoStatus {
    guard(|| {
        if out.is_null() {
            return fail(HvoStatus::NullPointer, "null output");
        }
        let Some(len) = n.checked_mul(3) else {
            return fail(HvoStatus::InvalidArgument, "point count overflows");
        };
        let (src, dst) = match (slice(src, len), slice(dst, len)) {
            (Ok(s), Ok(d)) => (s, d),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        let points = |v: &[f64]| v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        match umeyama_sim3(&points(src), &points(dst)) {
            Ok(s) => {
                let r = s.rotation.matrix();
                let mut rotation = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        rotation[3 * i + j] = r[(i, j)];
                    }
                }
                *out = HvoSim3 {
                    scale: s.scale,
                    rotation,
                    translation: [s.translation.x, s.translation.y, s.translation.z],
                };
                HvoStatus::Ok
            }
            Err(e) => fail(HvoStatus::Degenerate, e.to_string()),
        }
    })
}

/// Translation RMSE of `estimate` against `ground_truth` after alignment,
/// pairing poses whose timestamps differ by at most `max_gap` seconds.
///
/// # Safety
/// The pose arrays must be readable for their lengths and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hvo_ate_rmse(
    estimate: *const HvoPose,
    estimate_len: usize,
    ground_truth: *const HvoPose,
    ground_truth_len: usize,
    mode: HvoAlignMode,
    max_gap: f64,
    out: *mut f64,
) -> HvoStatus {
    guard(|| {
        if out.is_null() {
            return fail(HvoStatus::NullPointer, "null output");
        }
        if !(max_gap >= 0.0) {
            return fail(HvoStatus::InvalidArgument, "max_gap must be >= 0");
        }
        let (est, gt) = match (segment(estimate, estimate_len), segment(ground_truth, ground_truth_len)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        let mode = match mode {
            HvoAlignMode::Sim3 => AlignMode::Sim3,
            HvoAlignMode::Se3 => AlignMode::Se3,
            HvoAlignMode::None => AlignMode::None,
        };
        match ate_rmse(&est, &gt, mode, max_gap) {
            Ok(v) => {
                *out = v;
                HvoStatus::Ok
            }
            Err(e) => fail(HvoStatus::Degenerate, e.to_string()),
        }
    })
}

/// Pixel standard deviation of an observation with prediction confidence
/// `confidence` at pixel (`x`, `y`) in a `width` by `height` image.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hvo_adaptive_sigma(
    confidence: f64,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
    sigma_b: f64,
    k_p: f64,
    delta: f64,
    out: *mut f64,
) -> HvoStatus {
    guard(|| {
        if out.is_null() {
            return fail(HvoStatus::NullPointer, "null output");
        }
        let config = NoiseConfig {
            sigma_b,
            k_p,
            delta,
            edge_penalty: true,
            width,
            height,
        };
        if let Err(e) = config.validate() {
            return fail(HvoStatus::InvalidArgument, e.to_string());
        }
        match adaptive_sigma(confidence, &Vector2::new(x, y), &config) {
            Ok(s) => {
                *out = s;
                HvoStatus::Ok
            }
            Err(e) => fail(HvoStatus::InvalidArgument, e.to_string()),
        }
    })
}
