use std::collections::BTreeMap;

use hybrid_vo::alignment::{TrajectoryEntry, TrajectorySegment};
use hybrid_vo::backend::{KeyframeId, SubGraph};
use hybrid_vo::geometry::{relative_pose, so3_log, RigidPose};
use hybrid_vo::pipeline::{
    run_config, run_scenario, Pipeline, PipelineConfig, Predictor, RunOptions, SimulatedPredictor,
};
use hybrid_vo::simulator::{
    generate_scenario, render_scenario, Scenario, SimulatedTracks, SyntheticWorld,
};

const DETERMINISTIC: RunOptions = RunOptions {
    deterministic: true,
};

/// Records every dispatch and forwards it to the simulated predictor.
struct Recording<'a> {
    inner: SimulatedPredictor<'a>,
    batches: Vec<Vec<KeyframeId>>,
}

impl Predictor for Recording<'_> {
    fn predict(
        &mut self,
        index: usize,
        keyframes: &[(KeyframeId, usize, f64)],
        dispatched_at: f64,
    ) -> Result<SubGraph, String> {
        self.batches.push(keyframes.iter().map(|k| k.0).collect());
        self.inner.predict(index, keyframes, dispatched_at)
    }
}

/// Runs every frame without flushing pending sub-graphs, calling `inspect`
/// after each one. Returns the pipeline, the dispatched batches and the
/// keyframe poses at each dispatch.
fn drive_with(
    scenario: &Scenario,
    config: &PipelineConfig,
    inspect: &mut dyn FnMut(&Pipeline),
) -> (
    Pipeline,
    Vec<Vec<KeyframeId>>,
    Vec<BTreeMap<KeyframeId, RigidPose>>,
) {
    let mut pipeline = Pipeline::new(config.clone(), false).unwrap();
    let mut tracks = SimulatedTracks::new(
        scenario,
        config.predictor,
        config.degradation.events.clone(),
        config.seed,
    );
    let mut predictor = Recording {
        inner: SimulatedPredictor::new(scenario, config).unwrap(),
        batches: Vec::new(),
    };
    let mut snapshots = Vec::new();
    for frame in 0..scenario.frames.len() {
        let before = pipeline.stats().dispatched;
        pipeline
            .process_frame(frame, &mut tracks, &mut predictor)
            .unwrap();
        if pipeline.stats().dispatched > before {
            snapshots.push(pipeline.map().keyframe_poses());
        }
        inspect(&pipeline);
    }
    (pipeline, predictor.batches, snapshots)
}

fn drive(
    scenario: &Scenario,
    config: &PipelineConfig,
) -> (
    Pipeline,
    Vec<Vec<KeyframeId>>,
    Vec<BTreeMap<KeyframeId, RigidPose>>,
) {
    drive_with(scenario, config, &mut |_| {})
}

fn short(duration: f64, seed: u64) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.trajectory.duration = duration;
    config.seed = seed;
    config
}

fn max_pose_gap(a: &RigidPose, b: &RigidPose) -> f64 {
    let rel = relative_pose(a, b);
    so3_log(&rel.rotation).norm().max(rel.translation.norm())
}

#[test]
fn static_camera_after_bootstrap_stays_put() {
    let mut config = short(8.0, 3);
    config.world.pixel_noise = 0.0;
    let moving = generate_scenario(&config.world, &config.trajectory, config.seed).unwrap();
    let (probe, _, _) = drive(&moving, &config);
    let pair: Vec<usize> = probe
        .map()
        .keyframes
        .values()
        .take(2)
        .map(|k| k.frame_index)
        .collect();
    let init = pair[1];
    assert!(pair[0] < init, "bootstrap pair {pair:?}");

    let gt = moving.ground_truth.entries();
    let entries: Vec<TrajectoryEntry> = gt
        .iter()
        .map(|e| TrajectoryEntry {
            pose: gt[e.id.min(init as u64) as usize].pose,
            ..*e
        })
        .collect();
    let world = SyntheticWorld::generate(&config.world, config.seed).unwrap();
    let still = render_scenario(
        world,
        TrajectorySegment::new(entries).unwrap(),
        0.0,
        config.seed,
    )
    .unwrap();
    let out = run_scenario(&still, &config, DETERMINISTIC).unwrap();
    assert!(out.error.is_none());
    assert_eq!(out.metrics.keyframes, 2);
    let after: Vec<_> = out.highfreq.iter().filter(|e| e.frame >= init).collect();
    assert_eq!(after.len(), still.frames.len() - init);
    for e in &after {
        let gap = max_pose_gap(&after[0].pose, &e.pose);
        assert!(gap < 1e-8, "frame {}: moved {gap}", e.frame);
    }
}

#[test]
fn circle_high_frequency_error_below_one_percent_of_radius() {
    let config = PipelineConfig::default();
    let out = run_config(&config, DETERMINISTIC).unwrap();
    assert!(out.error.is_none());
    let ate = out.metrics.ate_highfreq_m.unwrap();
    assert!(
        ate < 0.01 * config.trajectory.radius,
        "ATE {ate} m on a {} m circle",
        config.trajectory.radius
    );
    assert_eq!(out.highfreq.len(), out.metrics.processed_frames);
    assert!(out
        .highfreq
        .windows(2)
        .all(|w| w[1].timestamp > w[0].timestamp));
}

#[test]
fn unbounded_latency_leaves_the_prefix_unchanged() {
    let mut config = short(8.0, 5);
    config.predictor.latency = 0.0;
    let prompt = run_config(&config, DETERMINISTIC).unwrap();
    config.predictor.latency = 1e6;
    let late = run_config(&config, DETERMINISTIC).unwrap();
    let horizon = prompt.stats.delivery_times[0];
    assert!(late.stats.delivery_times.is_empty());
    let a: Vec<_> = prompt
        .highfreq
        .iter()
        .filter(|e| e.timestamp < horizon)
        .collect();
    let b: Vec<_> = late
        .highfreq
        .iter()
        .filter(|e| e.timestamp < horizon)
        .collect();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn batches_share_one_overlap_keyframe() {
    let config = short(10.0, 2);
    let scenario = generate_scenario(&config.world, &config.trajectory, config.seed).unwrap();
    let (pipeline, batches, _) = drive(&scenario, &config);
    let size = config.predictor.batch_size;
    let k = pipeline.map().keyframes.len();
    let expected = if k < size {
        0
    } else {
        1 + (k - size) / (size - 1)
    };
    assert!(expected >= 2, "only {k} keyframes");
    assert_eq!(batches.len(), expected);
    assert_eq!(pipeline.stats().dispatched, expected);
    let ids: Vec<KeyframeId> = pipeline.map().keyframes.keys().copied().collect();
    assert_eq!(batches[0], ids[..size]);
    for w in batches.windows(2) {
        assert_eq!(w[1].len(), size);
        assert_eq!(w[1][0], *w[0].last().unwrap());
    }
    for b in &batches {
        assert!(b.windows(2).all(|p| p[1] > p[0]));
    }
}

#[test]
fn dispatch_count_follows_keyframe_count() {
    let config = short(6.0, 2);
    let scenario = generate_scenario(&config.world, &config.trajectory, config.seed).unwrap();
    let size = config.predictor.batch_size;
    let mut seen = Vec::new();
    drive_with(&scenario, &config, &mut |p| {
        let k = p.map().keyframes.len();
        let expected = if k < size {
            0
        } else {
            1 + (k - size) / (size - 1)
        };
        assert_eq!(p.stats().dispatched, expected, "{k} keyframes");
        seen.push(k);
    });
    assert!(
        seen.contains(&(size - 1)) && seen.contains(&size),
        "{seen:?}"
    );
}

#[test]
fn first_window_is_a_bootstrap() {
    let out = run_config(&short(10.0, 4), DETERMINISTIC).unwrap();
    let windows = &out.stats.windows;
    assert!(windows.len() >= 2);
    assert!(windows[0].bootstrap);
    assert!(windows[1..].iter().all(|w| !w.bootstrap));
}

#[test]
fn constant_hidden_scale_gives_one_scale() {
    let mut config = short(12.0, 6);
    config.world.pixel_noise = 0.0;
    config.predictor.normalize = false;
    config.predictor.scale_drift = 0.0;
    config.predictor.rot_noise = 0.0;
    config.predictor.trans_noise = 0.0;
    config.pipeline.drift = 0.0;
    let out = run_config(&config, DETERMINISTIC).unwrap();
    let scales: Vec<f64> = out.stats.windows.iter().map(|w| w.scale).collect();
    assert!(scales.len() >= 3, "{scales:?}");
    for s in &scales {
        assert!((s / scales[0] - 1.0).abs() < 1e-6, "{scales:?}");
    }
}

#[test]
fn delivery_uses_poses_refined_after_dispatch() {
    let mut config = short(10.0, 8);
    config.predictor.latency = 1e6;
    let scenario = generate_scenario(&config.world, &config.trajectory, config.seed).unwrap();
    let (mut pipeline, batches, snapshots) = drive(&scenario, &config);
    assert!(batches.len() >= 2);
    assert_eq!(pipeline.stats().delivered, 0);

    let current = pipeline.map().keyframe_poses();
    let moved = batches[0]
        .iter()
        .map(|id| max_pose_gap(&snapshots[0][id], &current[id]))
        .fold(0.0, f64::max);
    assert!(moved > 1e-4, "local BA left the first batch untouched");

    // predictions built from the current poses at half their scale
    for (index, ids) in batches.iter().enumerate() {
        let origin = current[&ids[0]].inverse();
        let poses = ids
            .iter()
            .map(|id| {
                let rel = origin.compose(&current[id]);
                RigidPose::new(rel.rotation, rel.translation * 0.5)
            })
            .collect();
        let kfs = &pipeline.map().keyframes;
        pipeline.on_subgraph_delivered(SubGraph {
            index,
            keyframes: ids.clone(),
            timestamps: ids.iter().map(|id| kfs[id].timestamp).collect(),
            poses,
            confidences: vec![1.0; ids.len()],
            first_cloud: Vec::new(),
            last_cloud: Vec::new(),
            dispatched_at: 0.0,
            deliver_at: 0.0,
        });
    }
    let windows = &pipeline.stats().windows;
    assert_eq!(windows.len(), batches.len());
    for w in windows {
        assert!(
            (w.scale - 2.0).abs() < 1e-6,
            "window {}: {}",
            w.index,
            w.scale
        );
    }
}
