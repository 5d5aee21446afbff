//! Per-frame orchestration: bootstrap, tracking, keyframes, local BA,
//! sub-graph dispatch and delivery.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::mpsc;
use std::thread;

use nalgebra::Vector2;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use super::config::{KeyframePolicy, PipelineConfig};
use super::PipelineError;
use crate::backend::ba::CHI2_2DOF_95;
use crate::backend::pgo::WindowOutcome;
use crate::backend::{
    covisible_window, local_ba, BaConfig, BackendError, KeyframeId, Map, MapPointId, ScaleBinder,
    SubGraph,
};
use crate::frontend::epipolar::essential_from_fundamental;
use crate::frontend::{
    decompose_essential, epipolar_ransac, p3p_ransac, refine_pose_pnp, select_tracker_mode,
    EpipolarMatch, PnpCorrespondence, RansacParams, TrackMeasurement, TrackProvider, TrackerMode,
    VelocityModel, CHI2_1DOF_95,
};
use crate::geometry::{project, triangulate, CameraIntrinsics, RigidPose};
use crate::uncertainty::{NoiseConfig, Observation, TrackSource};

/// Whether a track has a map point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Untriangulated,
    Triangulated(MapPointId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: u32,
    pub status: TrackStatus,
    /// Provider of the latest measurement.
    pub source: TrackSource,
    /// Accepted pixels by frame index.
    pub history: Vec<(usize, Vector2<f64>)>,
    /// Measurements taken at keyframes, oldest first.
    pub keyframe_obs: Vec<(KeyframeId, Observation)>,
}

impl FeatureTrack {
    fn new(id: u32, source: TrackSource) -> Self {
        Self {
            id,
            status: TrackStatus::Untriangulated,
            source,
            history: Vec::new(),
            keyframe_obs: Vec::new(),
        }
    }
}

/// The frontend's output for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEstimate {
    pub frame: usize,
    pub timestamp: f64,
    pub pose: RigidPose,
    pub mode: TrackerMode,
    pub inliers: usize,
    /// Refinement failed and the constant-velocity prediction was emitted.
    pub flagged: bool,
    pub keyframe: Option<KeyframeId>,
    /// Deterministic compute proxy: residual evaluations performed by the
    /// frontend for this frame.
    pub work: u64,
}

/// Source of predictor sub-graphs.
pub trait Predictor {
    /// Starts an inference over `keyframes` (id, frame index, timestamp).
    fn predict(
        &mut self,
        index: usize,
        keyframes: &[(KeyframeId, usize, f64)],
        dispatched_at: f64,
    ) -> Result<SubGraph, String>;
}

/// One published scale window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub index: usize,
    pub bootstrap: bool,
    pub fused_scale: f64,
    pub scale: f64,
    pub iterations: usize,
}

struct PgoJob {
    sub: SubGraph,
    vo_poses: BTreeMap<KeyframeId, RigidPose>,
}

type PgoReply = (usize, Result<WindowOutcome, BackendError>);

/// Runs stage-2 optimisation either inline at delivery time or on a worker
/// thread fed through a queue. Both produce the same results in the same
/// order because each job carries its own snapshot of the VO poses.
enum PgoExecutor {
    Inline(ScaleBinder),
    Worker {
        jobs: Option<mpsc::Sender<PgoJob>>,
        replies: mpsc::Receiver<PgoReply>,
        handle: Option<thread::JoinHandle<()>>,
    },
}

impl PgoExecutor {
    fn new(binder: ScaleBinder, threaded: bool) -> Self {
        if !threaded {
            return PgoExecutor::Inline(binder);
        }
        let (job_tx, job_rx) = mpsc::channel::<PgoJob>();
        let (reply_tx, reply_rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            let mut binder = binder;
            for job in job_rx {
                let index = job.sub.index;
                let result = binder.process(job.sub, &job.vo_poses);
                if reply_tx.send((index, result)).is_err() {
                    break;
                }
            }
        });
        PgoExecutor::Worker {
            jobs: Some(job_tx),
            replies: reply_rx,
            handle: Some(handle),
        }
    }

    fn submit(&mut self, job: PgoJob) -> Vec<PgoReply> {
        match self {
            PgoExecutor::Inline(binder) => {
                let index = job.sub.index;
                vec![(index, binder.process(job.sub, &job.vo_poses))]
            }
            PgoExecutor::Worker { jobs, .. } => {
                if let Some(tx) = jobs {
                    // The worker only stops when the sender is dropped.
                    let _ = tx.send(job);
                }
                Vec::new()
            }
        }
    }

    fn poll(&mut self) -> Vec<PgoReply> {
        match self {
            PgoExecutor::Inline(_) => Vec::new(),
            PgoExecutor::Worker { replies, .. } => replies.try_iter().collect(),
        }
    }

    fn finish(&mut self) -> Vec<PgoReply> {
        match self {
            PgoExecutor::Inline(_) => Vec::new(),
            PgoExecutor::Worker {
                jobs,
                replies,
                handle,
            } => {
                jobs.take();
                if let Some(h) = handle.take() {
                    let _ = h.join();
                }
                replies.try_iter().collect()
            }
        }
    }
}

struct Buffered {
    frame: usize,
    timestamp: f64,
    tracks: BTreeMap<u32, Observation>,
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineStats {
    pub rejection_rates: Vec<f64>,
    pub ba_failures: usize,
    pub windows: Vec<WindowSummary>,
    pub pgo_failures: Vec<String>,
    pub dispatched: usize,
    pub delivered: usize,
    /// Simulated time of each delivery made while frames were processed;
    /// the flush in `finish` is not listed.
    pub delivery_times: Vec<f64>,
    pub mode_switches: usize,
}

pub struct Pipeline {
    config: PipelineConfig,
    camera: CameraIntrinsics,
    noise: NoiseConfig,
    ba: BaConfig,
    map: Map,
    tracks: BTreeMap<u32, FeatureTrack>,
    velocity: Option<VelocityModel>,
    mode: TrackerMode,
    /// Accepted observations of the previous frame.
    previous: BTreeMap<u32, Observation>,
    /// Measurements of map-point tracks that failed the reprojection gate in
    /// the previous frame.
    gated: BTreeMap<u32, Observation>,
    last_keyframe: Option<KeyframeId>,
    last_kf_pixels: BTreeMap<u32, Vector2<f64>>,
    last_kf_tracked: usize,
    bootstrap: Vec<Buffered>,
    highfreq: Vec<FrameEstimate>,
    optimized: BTreeMap<KeyframeId, RigidPose>,
    batch: Vec<KeyframeId>,
    pending: VecDeque<SubGraph>,
    pgo: PgoExecutor,
    drift_log: f64,
    drift_rng: ChaCha8Rng,
    stats: PipelineStats,
}

impl Pipeline {
    /// `threaded` moves stage-2 optimisation to a worker thread.
    pub fn new(config: PipelineConfig, threaded: bool) -> Result<Self, PipelineError> {
        config.validate().map_err(PipelineError::Config)?;
        let binder = ScaleBinder::new(config.backend.pgo());
        Ok(Self {
            camera: config.world.camera,
            noise: config.noise_model(),
            ba: config.backend.ba(),
            map: Map::new(),
            tracks: BTreeMap::new(),
            velocity: None,
            mode: TrackerMode::Primary,
            previous: BTreeMap::new(),
            gated: BTreeMap::new(),
            last_keyframe: None,
            last_kf_pixels: BTreeMap::new(),
            last_kf_tracked: 0,
            bootstrap: Vec::new(),
            highfreq: Vec::new(),
            optimized: BTreeMap::new(),
            batch: Vec::new(),
            pending: VecDeque::new(),
            pgo: PgoExecutor::new(binder, threaded),
            drift_log: 0.0,
            drift_rng: crate::simulator::stream_rng(config.seed, 8),
            stats: PipelineStats::default(),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn map(&self) -> &Map {
        &self.map
    }

    pub fn tracks(&self) -> &BTreeMap<u32, FeatureTrack> {
        &self.tracks
    }

    pub fn mode(&self) -> TrackerMode {
        self.mode
    }

    pub fn is_initialized(&self) -> bool {
        self.velocity.is_some()
    }

    /// One entry per processed frame.
    pub fn highfreq(&self) -> &[FrameEstimate] {
        &self.highfreq
    }

    /// Keyframe poses published by stage 2, by keyframe id.
    pub fn published(&self) -> &BTreeMap<KeyframeId, RigidPose> {
        &self.optimized
    }

    /// Keyframe trajectory: the latest published stage-2 pose of every
    /// keyframe, or its current map pose when no window covered it.
    pub fn optimized_keyframes(&self) -> Vec<(usize, f64, RigidPose)> {
        self.map
            .keyframes
            .values()
            .map(|kf| {
                let pose = self.optimized.get(&kf.id).copied().unwrap_or(kf.pose);
                (kf.frame_index, kf.timestamp, pose)
            })
            .collect()
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn observation(&self, m: &TrackMeasurement) -> Option<Observation> {
        match m.source {
            TrackSource::Primary => Observation::primary(m.pixel, &self.noise).ok(),
            TrackSource::Robust => Observation::robust(m.pixel, m.confidence, &self.noise).ok(),
        }
    }

    fn ransac_seed(&self, frame: usize, salt: u64) -> u64 {
        self.config
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(4 * frame as u64 + salt)
    }

    fn reprojection_chi2(
        &self,
        pose: &RigidPose,
        point: &nalgebra::Vector3<f64>,
        obs: &Observation,
    ) -> f64 {
        match project(&self.camera, &pose.inverse(), point) {
            Ok(p) => (p - obs.pixel).norm_squared() / (obs.sigma * obs.sigma),
            Err(_) => f64::INFINITY,
        }
    }

    /// Processes one frame. Returns `None` while the two-view bootstrap is
    /// still collecting frames; after a successful bootstrap the estimates of
    /// all buffered frames are in [`Pipeline::highfreq`].
    pub fn process_frame(
        &mut self,
        frame: usize,
        provider: &mut dyn TrackProvider,
        predictor: &mut dyn Predictor,
    ) -> Result<Option<FrameEstimate>, PipelineError> {
        let t = provider.timestamp(frame);
        self.deliver_due(t);
        if !self.is_initialized() {
            self.bootstrap_step(frame, t, provider)?;
            return Ok(None);
        }
        let estimate = self.track_frame(frame, t, provider)?;
        self.highfreq.push(estimate);
        let estimate = self
            .maybe_create_keyframe(frame, t, predictor)
            .map_or(estimate, |kf| {
                let last = self.highfreq.last_mut().expect("just pushed");
                last.keyframe = Some(kf);
                *last
            });
        Ok(Some(estimate))
    }

    fn bootstrap_step(
        &mut self,
        frame: usize,
        t: f64,
        provider: &mut dyn TrackProvider,
    ) -> Result<(), PipelineError> {
        let tracks: BTreeMap<u32, Observation> = provider
            .primary(frame)
            .iter()
            .filter_map(|m| self.observation(m).map(|o| (m.track, o)))
            .collect();
        self.bootstrap.push(Buffered {
            frame,
            timestamp: t,
            tracks,
        });
        let flags = self.config.pipeline;
        let first = &self.bootstrap[0];
        let last = self.bootstrap.last().expect("just pushed");
        let common: Vec<(u32, Observation, Observation)> = last
            .tracks
            .iter()
            .filter_map(|(id, b)| first.tracks.get(id).map(|a| (*id, *a, *b)))
            .collect();
        let restart = |p: &mut Self| {
            let keep = p.bootstrap.pop().expect("non-empty");
            p.bootstrap.clear();
            p.bootstrap.push(keep);
        };
        if common.len() < flags.bootstrap_min_tracks
            || self.bootstrap.len() > flags.bootstrap_max_frames
        {
            restart(self);
            return Ok(());
        }
        let mut disparity: Vec<f64> = common
            .iter()
            .map(|(_, a, b)| (b.pixel - a.pixel).norm())
            .collect();
        if median(&mut disparity) <= flags.bootstrap_min_disparity {
            return Ok(());
        }
        if self.try_initialize(&common) {
            return Ok(());
        }
        if self.bootstrap.len() >= flags.bootstrap_max_frames {
            restart(self);
        }
        Ok(())
    }

    /// Two-view initialisation between the first and last buffered frames.
    fn try_initialize(&mut self, common: &[(u32, Observation, Observation)]) -> bool {
        let matches: Vec<EpipolarMatch> = common
            .iter()
            .map(|(_, a, b)| EpipolarMatch {
                a: a.pixel,
                b: b.pixel,
                sigma: a.sigma.max(b.sigma),
            })
            .collect();
        let params = RansacParams {
            confidence: self.config.frontend.ransac_confidence,
            max_iterations: self.config.frontend.ransac_max_iters,
            chi2: CHI2_1DOF_95,
            seed: self.ransac_seed(self.bootstrap[0].frame, 3),
        };
        let Ok(ransac) = epipolar_ransac(&matches, &params) else {
            return false;
        };
        let inliers: Vec<usize> = (0..matches.len()).filter(|i| ransac.inliers[*i]).collect();
        if inliers.len() < self.config.pipeline.bootstrap_min_tracks {
            return false;
        }
        let e = essential_from_fundamental(&ransac.model, &self.camera);
        let inlier_matches: Vec<EpipolarMatch> = inliers.iter().map(|i| matches[*i]).collect();
        let Ok(two_view) = decompose_essential(&e, &self.camera, &inlier_matches) else {
            return false;
        };
        if (two_view.in_front as f64) < 0.9 * inliers.len() as f64 {
            return false;
        }
        let b_from_a = two_view.b_from_a;
        let norm = b_from_a.translation.norm();
        if !(norm > 0.0) {
            return false;
        }
        let pose_a = RigidPose::identity();
        let pose_b = RigidPose::new(b_from_a.rotation, b_from_a.translation / norm).inverse();

        let min_deg = self.config.keyframe.min_triangulation_deg;
        let mut points = Vec::new();
        for i in &inliers {
            let (id, a, b) = common[*i];
            let Ok(p) = triangulate(&pose_a, &pose_b, &self.camera, &a.pixel, &b.pixel, min_deg)
            else {
                continue;
            };
            if self.reprojection_chi2(&pose_a, &p, &a) < CHI2_2DOF_95
                && self.reprojection_chi2(&pose_b, &p, &b) < CHI2_2DOF_95
            {
                points.push((id, p));
            }
        }
        if points.len() < self.config.pipeline.bootstrap_min_tracks {
            return false;
        }

        let buffered = std::mem::take(&mut self.bootstrap);
        let (first, last) = (&buffered[0], &buffered[buffered.len() - 1]);
        let kf0 = self.map.add_keyframe(first.timestamp, first.frame, pose_a);
        let kf1 = self.map.add_keyframe(last.timestamp, last.frame, pose_b);
        for (id, p) in &points {
            let pid = self.map.add_point(*p, *id);
            self.map.add_observation(kf0, pid, first.tracks[id]);
            self.map.add_observation(kf1, pid, last.tracks[id]);
            let track = self
                .tracks
                .entry(*id)
                .or_insert_with(|| FeatureTrack::new(*id, TrackSource::Primary));
            track.status = TrackStatus::Triangulated(pid);
        }
        for (kf, buf) in [(kf0, first), (kf1, last)] {
            for (id, obs) in &buf.tracks {
                self.tracks
                    .entry(*id)
                    .or_insert_with(|| FeatureTrack::new(*id, TrackSource::Primary))
                    .keyframe_obs
                    .push((kf, *obs));
            }
        }

        // Poses of every buffered frame, intermediate ones by PnP against the
        // new points with interpolation as a fallback.
        let n = buffered.len();
        let mut poses = Vec::with_capacity(n);
        for (k, buf) in buffered.iter().enumerate() {
            let mut work = 0;
            let mut flagged = false;
            let pose = if k == 0 {
                pose_a
            } else if k == n - 1 {
                pose_b
            } else {
                let alpha = (buf.timestamp - first.timestamp) / (last.timestamp - first.timestamp);
                let interp = interpolate(&pose_a, &pose_b, alpha);
                let corr: Vec<PnpCorrespondence> = buf
                    .tracks
                    .iter()
                    .filter_map(|(id, obs)| match self.tracks.get(id).map(|t| t.status) {
                        Some(TrackStatus::Triangulated(pid)) => Some(PnpCorrespondence {
                            point: self.map.points[&pid].position,
                            obs: *obs,
                        }),
                        _ => None,
                    })
                    .collect();
                match self.solve_pnp(&corr, buf.frame, &mut work) {
                    Some((pose, _)) => pose,
                    None => {
                        flagged = true;
                        interp
                    }
                }
            };
            for (id, obs) in &buf.tracks {
                let track = self
                    .tracks
                    .entry(*id)
                    .or_insert_with(|| FeatureTrack::new(*id, TrackSource::Primary));
                track.history.push((buf.frame, obs.pixel));
            }
            poses.push(pose);
            self.highfreq.push(FrameEstimate {
                frame: buf.frame,
                timestamp: buf.timestamp,
                pose,
                mode: TrackerMode::Primary,
                inliers: points.len(),
                flagged,
                keyframe: (k == 0).then_some(kf0).or((k == n - 1).then_some(kf1)),
                work,
            });
        }
        let prev = &buffered[n - 2];
        let mut velocity = VelocityModel::new(poses[n - 2], prev.timestamp);
        velocity.update(pose_b, last.timestamp);
        self.velocity = Some(velocity);
        self.previous = last.tracks.clone();
        self.last_keyframe = Some(kf1);
        self.last_kf_pixels = last.tracks.iter().map(|(id, o)| (*id, o.pixel)).collect();
        self.last_kf_tracked = points.len();
        self.batch = vec![kf0, kf1];
        true
    }

    /// P3P-RANSAC followed by robust refinement. Returns the pose and the
    /// inlier correspondences' indices.
    fn solve_pnp(
        &self,
        corr: &[PnpCorrespondence],
        frame: usize,
        work: &mut u64,
    ) -> Option<(RigidPose, Vec<usize>)> {
        let fc = &self.config.frontend;
        let params = RansacParams {
            confidence: fc.ransac_confidence,
            max_iterations: fc.ransac_max_iters,
            chi2: CHI2_2DOF_95,
            seed: self.ransac_seed(frame, 1),
        };
        let ransac = p3p_ransac(corr, &self.camera, &params).ok()?;
        *work += (ransac.iterations * corr.len()) as u64;
        let idx: Vec<usize> = (0..corr.len()).filter(|i| ransac.inliers[*i]).collect();
        if idx.len() < fc.min_inliers {
            return None;
        }
        let inliers: Vec<PnpCorrespondence> = idx.iter().map(|i| corr[*i]).collect();
        let (pose, report) =
            refine_pose_pnp(&ransac.model, &inliers, &self.camera, Some(fc.huber_delta)).ok()?;
        *work += (report.evaluations * inliers.len()) as u64;
        Some((pose, idx))
    }

    fn track_frame(
        &mut self,
        frame: usize,
        t: f64,
        provider: &mut dyn TrackProvider,
    ) -> Result<FrameEstimate, PipelineError> {
        let fc = self.config.frontend;
        let predicted = self.velocity.as_ref().expect("initialised").predict(t);
        let primary = provider.primary(frame);
        let tracked = primary
            .iter()
            .filter(|m| {
                matches!(
                    self.tracks.get(&m.track).map(|t| t.status),
                    Some(TrackStatus::Triangulated(_))
                )
            })
            .count();
        if self.config.pipeline.enable_robust {
            let next = select_tracker_mode(tracked, fc.tau, fc.tau_recover, self.mode);
            if next != self.mode {
                self.stats.mode_switches += 1;
            }
            self.mode = next;
        }
        let measurements = match self.mode {
            TrackerMode::Primary => primary,
            TrackerMode::Robust => provider.robust(frame),
        };
        let obs: Vec<(u32, TrackSource, Observation)> = measurements
            .iter()
            .filter_map(|m| self.observation(m).map(|o| (m.track, m.source, o)))
            .collect();
        let mut work = obs.len() as u64;

        // Epipolar check against the previous frame.
        let mut rejected: BTreeSet<u32> = BTreeSet::new();
        let pairs: Vec<(u32, EpipolarMatch)> = obs
            .iter()
            .filter_map(|(id, _, o)| {
                self.previous.get(id).map(|p| {
                    (
                        *id,
                        EpipolarMatch {
                            a: p.pixel,
                            b: o.pixel,
                            sigma: p.sigma.max(o.sigma),
                        },
                    )
                })
            })
            .collect();
        let mut disparity: Vec<f64> = pairs.iter().map(|(_, m)| (m.b - m.a).norm()).collect();
        if pairs.len() >= 8 && median(&mut disparity) >= 1.0 {
            let matches: Vec<EpipolarMatch> = pairs.iter().map(|(_, m)| *m).collect();
            let params = RansacParams {
                confidence: fc.ransac_confidence,
                max_iterations: fc.ransac_max_iters,
                chi2: CHI2_1DOF_95,
                seed: self.ransac_seed(frame, 2),
            };
            if let Ok(out) = epipolar_ransac(&matches, &params) {
                work += (out.iterations * matches.len()) as u64;
                rejected.extend(
                    pairs
                        .iter()
                        .zip(&out.inliers)
                        .filter(|(_, ok)| !**ok)
                        .map(|((id, _), _)| *id),
                );
            }
        }

        // PnP against the map.
        let mut corr = Vec::new();
        let mut corr_tracks = Vec::new();
        for (id, _, o) in &obs {
            if rejected.contains(id) {
                continue;
            }
            if let Some(TrackStatus::Triangulated(pid)) = self.tracks.get(id).map(|t| t.status) {
                if let Some(p) = self.map.points.get(&pid) {
                    corr.push(PnpCorrespondence {
                        point: p.position,
                        obs: *o,
                    });
                    corr_tracks.push(*id);
                }
            }
        }
        if corr.len() < fc.min_inliers {
            return Err(PipelineError::TrackingLost {
                frame,
                reason: format!("{} map points tracked, need {}", corr.len(), fc.min_inliers),
            });
        }
        let params = RansacParams {
            confidence: fc.ransac_confidence,
            max_iterations: fc.ransac_max_iters,
            chi2: CHI2_2DOF_95,
            seed: self.ransac_seed(frame, 1),
        };
        let ransac =
            p3p_ransac(&corr, &self.camera, &params).map_err(|e| PipelineError::TrackingLost {
                frame,
                reason: e.to_string(),
            })?;
        work += (ransac.iterations * corr.len()) as u64;
        let inlier_idx: Vec<usize> = (0..corr.len()).filter(|i| ransac.inliers[*i]).collect();
        if inlier_idx.len() < fc.min_inliers {
            return Err(PipelineError::TrackingLost {
                frame,
                reason: format!("{} PnP inliers, need {}", inlier_idx.len(), fc.min_inliers),
            });
        }
        let inliers: Vec<PnpCorrespondence> = inlier_idx.iter().map(|i| corr[*i]).collect();
        let (pose, flagged) =
            match refine_pose_pnp(&ransac.model, &inliers, &self.camera, Some(fc.huber_delta)) {
                Ok((pose, report)) => {
                    work += (report.evaluations * inliers.len()) as u64;
                    (pose, false)
                }
                Err(_) => (predicted, true),
            };

        // Accept measurements: map-point tracks must reproject within the gate.
        let map_tracks: BTreeMap<u32, usize> = corr_tracks
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        let mut accepted = BTreeMap::new();
        let mut gated = BTreeMap::new();
        let mut inlier_count = 0;
        for (id, source, o) in &obs {
            if rejected.contains(id) {
                continue;
            }
            if let Some(i) = map_tracks.get(id) {
                if self.reprojection_chi2(&pose, &corr[*i].point, o) >= CHI2_2DOF_95 {
                    gated.insert(*id, *o);
                    continue;
                }
                inlier_count += 1;
            } else if matches!(
                self.tracks.get(id).map(|t| t.status),
                Some(TrackStatus::Triangulated(_))
            ) {
                continue;
            }
            let track = self
                .tracks
                .entry(*id)
                .or_insert_with(|| FeatureTrack::new(*id, *source));
            track.source = *source;
            track.history.push((frame, o.pixel));
            accepted.insert(*id, *o);
        }
        self.previous = accepted;
        self.gated = gated;
        self.velocity.as_mut().expect("initialised").update(pose, t);
        Ok(FrameEstimate {
            frame,
            timestamp: t,
            pose,
            mode: self.mode,
            inliers: inlier_count,
            flagged,
            keyframe: None,
            work,
        })
    }

    fn maybe_create_keyframe(
        &mut self,
        frame: usize,
        t: f64,
        predictor: &mut dyn Predictor,
    ) -> Option<KeyframeId> {
        let policy = self.config.keyframe;
        // Parallax with the rotation between the frames removed, so turning
        // in place does not trigger keyframes.
        let current = self.highfreq.last().expect("frame estimated").pose;
        let last = self
            .last_keyframe
            .and_then(|k| self.map.keyframes.get(&k))
            .map_or(current, |k| k.pose);
        let rotation = current.rotation.inverse().compose(&last.rotation);
        let mut parallax: Vec<f64> = self
            .previous
            .iter()
            .filter_map(|(id, o)| {
                let p = self.last_kf_pixels.get(id)?;
                let derotated = self
                    .camera
                    .project_camera(&rotation.rotate(&self.camera.unproject(p)))
                    .ok()?;
                Some((o.pixel - derotated).norm())
            })
            .collect();
        let tracked = self
            .previous
            .keys()
            .filter(|id| {
                matches!(
                    self.tracks.get(id).map(|t| t.status),
                    Some(TrackStatus::Triangulated(_))
                )
            })
            .count();
        let ratio = tracked as f64 / self.last_kf_tracked.max(1) as f64;
        let parallax = (!parallax.is_empty()).then(|| median(&mut parallax));
        if !keyframe_due(parallax, ratio, &policy) {
            return None;
        }
        let pose = self.highfreq.last().expect("frame estimated").pose;
        let kf = self.map.add_keyframe(t, frame, pose);
        let accepted = self.previous.clone();
        for (id, obs) in &accepted {
            let track = self.tracks.get_mut(id).expect("accepted tracks exist");
            if let TrackStatus::Triangulated(pid) = track.status {
                if self.map.points.contains_key(&pid) {
                    self.map.add_observation(kf, pid, *obs);
                }
            }
            track.keyframe_obs.push((kf, *obs));
        }
        let gated = std::mem::take(&mut self.gated);
        for (id, obs) in &gated {
            self.tracks
                .get_mut(id)
                .expect("gated tracks exist")
                .keyframe_obs
                .push((kf, *obs));
        }
        self.triangulate_new(kf, &pose, &accepted, false);
        self.triangulate_new(kf, &pose, &gated, true);
        self.run_local_ba(kf);
        let refined = self.map.keyframes[&kf].pose;
        self.velocity
            .as_mut()
            .expect("initialised")
            .correct(refined);
        self.last_keyframe = Some(kf);
        self.last_kf_pixels = accepted.iter().map(|(id, o)| (*id, o.pixel)).collect();
        self.last_kf_tracked = self.map.keyframes[&kf].observations.len();
        if self.config.pipeline.drift > 0.0 {
            self.drift_log +=
                crate::simulator::normal(self.config.pipeline.drift).sample(&mut self.drift_rng);
        }
        self.batch.push(kf);
        self.dispatch_subgraph(t, predictor);
        Some(kf)
    }

    /// Triangulates tracks seen at an earlier keyframe and at `kf` from the
    /// widest baseline available. With `replace`, tracks whose map point no
    /// longer reprojects get a fresh point when the new one is consistent with
    /// every keyframe measurement that the old one was.
    fn triangulate_new(
        &mut self,
        kf: KeyframeId,
        pose: &RigidPose,
        candidates: &BTreeMap<u32, Observation>,
        replace: bool,
    ) {
        let min_deg = self.config.keyframe.min_triangulation_deg;
        let drift = self.drift_log.exp();
        for (id, obs) in candidates {
            let track = &self.tracks[id];
            let old = match track.status {
                TrackStatus::Triangulated(pid) if replace => Some(pid),
                TrackStatus::Untriangulated if !replace => None,
                _ => continue,
            };
            if track.keyframe_obs.len() < 2 {
                continue;
            }
            let Some((kf_a, obs_a)) = track
                .keyframe_obs
                .iter()
                .find(|(k, _)| *k != kf && self.map.keyframes.contains_key(k))
                .copied()
            else {
                continue;
            };
            let pose_a = self.map.keyframes[&kf_a].pose;
            let Ok(mut p) = triangulate(
                &pose_a,
                pose,
                &self.camera,
                &obs_a.pixel,
                &obs.pixel,
                min_deg,
            ) else {
                continue;
            };
            if drift != 1.0 {
                p = pose.transform_point(&(pose.inverse().transform_point(&p) * drift));
            }
            let good: Vec<(KeyframeId, Observation)> = track
                .keyframe_obs
                .iter()
                .filter(|(k, o)| {
                    self.map
                        .keyframes
                        .get(k)
                        .is_some_and(|kfr| self.reprojection_chi2(&kfr.pose, &p, o) < CHI2_2DOF_95)
                })
                .copied()
                .collect();
            if !good.iter().any(|(k, _)| *k == kf) || good.len() < 2 {
                continue;
            }
            if let Some(old) = old {
                let observers = self.map.points.get(&old).map_or(0, |m| m.observers.len());
                if good.len() <= observers {
                    continue;
                }
                self.map.remove_point(old);
            }
            let pid = self.map.add_point(p, *id);
            for (k, o) in good {
                self.map.add_observation(k, pid, o);
            }
            self.tracks.get_mut(id).expect("exists").status = TrackStatus::Triangulated(pid);
        }
    }

    fn run_local_ba(&mut self, kf: KeyframeId) {
        let window = covisible_window(&self.map, kf, self.ba.covis_threshold);
        match local_ba(&mut self.map, &window, &self.camera, &self.ba) {
            Ok(report) => {
                self.stats.rejection_rates.push(report.rejection_rate());
                let culled: BTreeSet<MapPointId> = report.culled.iter().copied().collect();
                if !culled.is_empty() {
                    for track in self.tracks.values_mut() {
                        if let TrackStatus::Triangulated(pid) = track.status {
                            if culled.contains(&pid) {
                                track.status = TrackStatus::Untriangulated;
                                track.keyframe_obs.retain(|(k, _)| *k == kf);
                            }
                        }
                    }
                }
            }
            Err(_) => self.stats.ba_failures += 1,
        }
    }

    fn dispatch_subgraph(&mut self, t: f64, predictor: &mut dyn Predictor) {
        let size = self.config.predictor.batch_size;
        if self.batch.len() < size {
            return;
        }
        let overlap = *self.batch.last().expect("non-empty");
        let batch = std::mem::replace(&mut self.batch, vec![overlap]);
        if !self.config.pipeline.enable_pgo {
            return;
        }
        let keyframes: Vec<(KeyframeId, usize, f64)> = batch
            .iter()
            .map(|id| {
                let kf = &self.map.keyframes[id];
                (*id, kf.frame_index, kf.timestamp)
            })
            .collect();
        let index = self.stats.dispatched;
        self.stats.dispatched += 1;
        match predictor.predict(index, &keyframes, t) {
            Ok(sub) => self.pending.push_back(sub),
            Err(e) => self
                .stats
                .pgo_failures
                .push(format!("sub-graph {index}: {e}")),
        }
    }

    /// Delivers every pending sub-graph due at or before `t`.
    pub fn deliver_due(&mut self, t: f64) {
        while self.pending.front().is_some_and(|s| s.deliver_at <= t) {
            let sub = self.pending.pop_front().expect("checked");
            self.stats.delivery_times.push(t);
            self.on_subgraph_delivered(sub);
        }
        let replies = self.pgo.poll();
        self.publish(replies);
    }

    /// Stage 2 on the current VO poses, which may have been refined by local
    /// BA since the sub-graph was dispatched.
    pub fn on_subgraph_delivered(&mut self, sub: SubGraph) {
        self.stats.delivered += 1;
        let job = PgoJob {
            sub,
            vo_poses: self.map.keyframe_poses(),
        };
        let replies = self.pgo.submit(job);
        self.publish(replies);
    }

    fn publish(&mut self, replies: Vec<PgoReply>) {
        for (index, reply) in replies {
            match reply {
                Ok(outcome) => {
                    self.optimized
                        .extend(outcome.poses.iter().map(|(k, p)| (*k, *p)));
                    self.stats.windows.push(WindowSummary {
                        index: outcome.index,
                        bootstrap: outcome.bootstrap,
                        fused_scale: outcome.fused_scale,
                        scale: outcome.scale,
                        iterations: outcome.report.iterations,
                    });
                }
                Err(e) => self
                    .stats
                    .pgo_failures
                    .push(format!("sub-graph {index}: {e}")),
            }
        }
    }

    /// Delivers everything still in flight and waits for stage 2.
    pub fn finish(&mut self) {
        while let Some(sub) = self.pending.pop_front() {
            self.on_subgraph_delivered(sub);
        }
        let replies = self.pgo.finish();
        self.publish(replies);
    }
}

/// Keyframe trigger: median de-rotated parallax since the last keyframe
/// above `parallax_px`, or the fraction of its map points still tracked below
/// `min_tracked_ratio`.
pub fn keyframe_due(
    median_parallax: Option<f64>,
    tracked_ratio: f64,
    policy: &KeyframePolicy,
) -> bool {
    median_parallax.is_some_and(|p| p > policy.parallax_px)
        || tracked_ratio < policy.min_tracked_ratio
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn interpolate(a: &RigidPose, b: &RigidPose, alpha: f64) -> RigidPose {
    let xi = a.inverse().compose(b).log().map(|v| v * alpha);
    a.compose(&RigidPose::exp(&xi))
}
