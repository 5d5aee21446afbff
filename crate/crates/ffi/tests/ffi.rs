use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use hybrid_vo_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { hvo_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn pose(t: f64, x: f64, y: f64, z: f64) -> HvoPose {
    HvoPose {
        timestamp: t,
        tx: x,
        ty: y,
        tz: z,
        qw: 1.0,
        ..HvoPose::default()
    }
}

#[test]
fn adaptive_sigma_matches_examples() {
    let mut s = 0.0;
    let ok = |u, x, y, s: &mut f64| unsafe { hvo_adaptive_sigma(u, x, y, 640.0, 480.0, 1.0, 10.0, 20.0, s) };
    assert_eq!(ok(1.0, 320.0, 240.0, &mut s), HvoStatus::Ok);
    assert_eq!(s, 1.0);
    assert_eq!(ok(0.5, 320.0, 240.0, &mut s), HvoStatus::Ok);
    assert_eq!(s, 2.0);
    assert_eq!(ok(0.5, 5.0, 240.0, &mut s), HvoStatus::Ok);
    assert_eq!(s, 20.0);
    assert_eq!(ok(0.0, 320.0, 240.0, &mut s), HvoStatus::InvalidArgument);
    assert!(last_error().contains("confidence"), "{}", last_error());
    let status = unsafe { hvo_adaptive_sigma(1.0, 0.0, 0.0, 640.0, 480.0, 1.0, 10.0, 20.0, ptr::null_mut()) };
    assert_eq!(status, HvoStatus::NullPointer);
}

#[test]
fn umeyama_recovers_similarity() {
    let src: Vec<f64> = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 1.0];
    // x -> 2 * Rz(90) * x + (1, 2, 3)
    let dst: Vec<f64> = src
        .chunks(3)
        .flat_map(|p| [2.0 * -p[1] + 1.0, 2.0 * p[0] + 2.0, 2.0 * p[2] + 3.0])
        .collect();
    let mut out = HvoSim3::default();
    let status = unsafe { hvo_umeyama(src.as_ptr(), dst.as_ptr(), 5, &mut out) };
    assert_eq!(status, HvoStatus::Ok);
    assert!((out.scale - 2.0).abs() < 1e-12);
    let expected = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    for (a, b) in out.rotation.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in out.translation.iter().zip([1.0, 2.0, 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    let status = unsafe { hvo_umeyama(src.as_ptr(), dst.as_ptr(), 2, &mut out) };
    assert_eq!(status, HvoStatus::Degenerate);
}

#[test]
fn ate_is_zero_for_scaled_copy() {
    let gt: Vec<HvoPose> = (0..20)
        .map(|k| {
            let t = k as f64 * 0.1;
            pose(t, t.cos(), t.sin(), 0.1 * t)
        })
        .collect();
    let est: Vec<HvoPose> = gt
        .iter()
        .map(|p| pose(p.timestamp, 3.0 * p.tx + 1.0, 3.0 * p.ty - 2.0, 3.0 * p.tz))
        .collect();
    let mut ate = f64::NAN;
    let status = unsafe { hvo_ate_rmse(est.as_ptr(), est.len(), gt.as_ptr(), gt.len(), HvoAlignMode::Sim3, 0.01, &mut ate) };
    assert_eq!(status, HvoStatus::Ok);
    assert!(ate.abs() < 1e-9, "{ate}");
    let status = unsafe { hvo_ate_rmse(est.as_ptr(), est.len(), gt.as_ptr(), gt.len(), HvoAlignMode::None, 0.01, &mut ate) };
    assert_eq!(status, HvoStatus::Ok);
    assert!(ate > 1.0);
    let bad = [HvoPose::default()];
    let status = unsafe { hvo_ate_rmse(bad.as_ptr(), 1, gt.as_ptr(), gt.len(), HvoAlignMode::Sim3, 0.01, &mut ate) };
    assert_eq!(status, HvoStatus::InvalidArgument);
}

#[test]
fn invalid_config_reports_line() {
    let text = CString::new("seed = 1\n[frontend]\ntau = \"x\"\n").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { hvo_pipeline_create(text.as_ptr(), 0, 0, &mut handle) };
    assert_eq!(status, HvoStatus::Config);
    assert!(handle.is_null());
    assert!(last_error().contains(":3:"), "{}", last_error());
}

#[test]
fn pipeline_lifecycle() {
    let text = CString::new("[trajectory]\nduration = 4.0\n[world]\nlandmarks = 800\n").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hvo_pipeline_create(text.as_ptr(), 7, 1, &mut handle) }, HvoStatus::Ok);
    let mut len = 0;
    assert_eq!(
        unsafe { hvo_pipeline_trajectory_len(handle, HvoTrajectory::HighFrequency, &mut len) },
        HvoStatus::NotRun
    );
    assert_eq!(unsafe { hvo_pipeline_run(handle) }, HvoStatus::Ok, "{}", last_error());

    let mut gt_len = 0;
    assert_eq!(unsafe { hvo_pipeline_trajectory_len(handle, HvoTrajectory::GroundTruth, &mut gt_len) }, HvoStatus::Ok);
    assert_eq!(gt_len, 81);
    assert_eq!(unsafe { hvo_pipeline_trajectory_len(handle, HvoTrajectory::HighFrequency, &mut len) }, HvoStatus::Ok);
    assert!(len > 40 && len <= gt_len, "{len}");

    let mut poses = vec![HvoPose::default(); len];
    let mut written = 0;
    let status = unsafe {
        hvo_pipeline_trajectory_copy(handle, HvoTrajectory::HighFrequency, poses.as_mut_ptr(), len - 1, &mut written)
    };
    assert_eq!(status, HvoStatus::BufferTooSmall);
    assert_eq!(written, 0);
    let status = unsafe {
        hvo_pipeline_trajectory_copy(handle, HvoTrajectory::HighFrequency, poses.as_mut_ptr(), len, &mut written)
    };
    assert_eq!(status, HvoStatus::Ok);
    assert_eq!(written, len);
    assert!(poses.windows(2).all(|w| w[1].timestamp > w[0].timestamp));

    let mut gt = vec![HvoPose::default(); gt_len];
    unsafe { hvo_pipeline_trajectory_copy(handle, HvoTrajectory::GroundTruth, gt.as_mut_ptr(), gt_len, &mut written) };
    let mut ate = f64::NAN;
    let status = unsafe { hvo_ate_rmse(poses.as_ptr(), len, gt.as_ptr(), gt_len, HvoAlignMode::Sim3, 0.01, &mut ate) };
    assert_eq!(status, HvoStatus::Ok);
    assert!(ate < 0.2, "{ate}");

    let mut needed = 0;
    let status = unsafe { hvo_pipeline_metrics(handle, ptr::null_mut(), 0, &mut needed) };
    assert_eq!(status, HvoStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; needed + 1];
    assert_eq!(unsafe { hvo_pipeline_metrics(handle, buf.as_mut_ptr(), buf.len(), &mut needed) }, HvoStatus::Ok);
    let text: String = buf[..needed].iter().map(|c| *c as u8 as char).collect();
    assert!(text.contains("ate_highfreq_m="), "{text}");
    assert!(!text.contains("frontend_ms_p50"), "deterministic runs carry no timings");
    unsafe { hvo_pipeline_free(handle) };
    unsafe { hvo_pipeline_free(ptr::null_mut()) };
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hvo_pipeline_create(ptr::null(), 0, 0, &mut handle) }, HvoStatus::NullPointer);
    assert_eq!(unsafe { hvo_pipeline_run(ptr::null_mut()) }, HvoStatus::NullPointer);
    let mut len = 0;
    assert_eq!(
        unsafe { hvo_pipeline_trajectory_len(ptr::null(), HvoTrajectory::Optimized, &mut len) },
        HvoStatus::NullPointer
    );
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hybrid_vo.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "hvo_pipeline_create",
        "hvo_pipeline_run",
        "hvo_pipeline_trajectory_copy",
        "hvo_pipeline_free",
        "hvo_umeyama",
        "hvo_ate_rmse",
        "hvo_adaptive_sigma",
        "hvo_last_error_message",
        "typedef struct HvoPipeline HvoPipeline",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"hybrid_vo.h\"\nint main(void) { HvoPipeline *p = 0; hvo_pipeline_free(p); return HVO_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler available; skipped the compile check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
