//! Keyframes, map points and the covisibility graph.
//!
//! Keyframe poses are world-from-camera. All collections are ordered maps so
//! that iteration, and therefore every floating-point accumulation built on
//! top of it, is deterministic.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;

use crate::geometry::RigidPose;
use crate::uncertainty::Observation;

pub type KeyframeId = u64;
pub type MapPointId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    /// Index of the source frame in the input stream.
    pub frame_index: usize,
    pub pose: RigidPose,
    pub observations: BTreeMap<MapPointId, Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    /// Track (landmark) id the point was created from.
    pub track: u32,
    pub observers: BTreeSet<KeyframeId>,
}

/// Symmetric keyframe graph weighted by shared map points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovisibilityGraph {
    edges: BTreeMap<(KeyframeId, KeyframeId), u32>,
}

fn edge_key(a: KeyframeId, b: KeyframeId) -> (KeyframeId, KeyframeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CovisibilityGraph {
    pub fn weight(&self, a: KeyframeId, b: KeyframeId) -> u32 {
        self.edges.get(&edge_key(a, b)).copied().unwrap_or(0)
    }

    pub fn set_weight(&mut self, a: KeyframeId, b: KeyframeId, w: u32) {
        if a == b {
            return;
        }
        if w == 0 {
            self.edges.remove(&edge_key(a, b));
        } else {
            self.edges.insert(edge_key(a, b), w);
        }
    }

    fn bump(&mut self, a: KeyframeId, b: KeyframeId, delta: i64) {
        let w = (self.weight(a, b) as i64 + delta).max(0) as u32;
        self.set_weight(a, b, w);
    }

    /// Neighbours of `kf` with their weights, in id order.
    pub fn neighbors(&self, kf: KeyframeId) -> Vec<(KeyframeId, u32)> {
        let mut out: Vec<_> = self
            .edges
            .iter()
            .filter_map(|(&(a, b), &w)| {
                if a == kf {
                    Some((b, w))
                } else if b == kf {
                    Some((a, w))
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn edges(&self) -> impl Iterator<Item = ((KeyframeId, KeyframeId), u32)> + '_ {
        self.edges.iter().map(|(k, v)| (*k, *v))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Map {
    pub keyframes: BTreeMap<KeyframeId, Keyframe>,
    pub points: BTreeMap<MapPointId, MapPoint>,
    pub covisibility: CovisibilityGraph,
    next_keyframe: KeyframeId,
    next_point: MapPointId,
}

impl Map {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_keyframe(
        &mut self,
        timestamp: f64,
        frame_index: usize,
        pose: RigidPose,
    ) -> KeyframeId {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        self.keyframes.insert(
            id,
            Keyframe {
                id,
                timestamp,
                frame_index,
                pose,
                observations: BTreeMap::new(),
            },
        );
        id
    }

    pub fn add_point(&mut self, position: Vector3<f64>, track: u32) -> MapPointId {
        let id = self.next_point;
        self.next_point += 1;
        self.points.insert(
            id,
            MapPoint {
                id,
                position,
                track,
                observers: BTreeSet::new(),
            },
        );
        id
    }

    /// Records that `kf` observes `point`, updating covisibility weights.
    pub fn add_observation(&mut self, kf: KeyframeId, point: MapPointId, obs: Observation) -> bool {
        let Some(mp) = self.points.get_mut(&point) else {
            return false;
        };
        let Some(frame) = self.keyframes.get_mut(&kf) else {
            return false;
        };
        if frame.observations.insert(point, obs).is_some() {
            return true;
        }
        for &other in &mp.observers {
            self.covisibility.bump(kf, other, 1);
        }
        mp.observers.insert(kf);
        true
    }

    pub fn remove_observation(&mut self, kf: KeyframeId, point: MapPointId) {
        let Some(frame) = self.keyframes.get_mut(&kf) else {
            return;
        };
        if frame.observations.remove(&point).is_none() {
            return;
        }
        if let Some(mp) = self.points.get_mut(&point) {
            mp.observers.remove(&kf);
            for &other in &mp.observers {
                self.covisibility.bump(kf, other, -1);
            }
        }
    }

    /// Removes a point and all its observations.
    pub fn remove_point(&mut self, point: MapPointId) {
        let observers: Vec<_> = match self.points.get(&point) {
            Some(mp) => mp.observers.iter().copied().collect(),
            None => return,
        };
        for kf in observers {
            self.remove_observation(kf, point);
        }
        self.points.remove(&point);
    }

    /// Covisibility recomputed from scratch out of the observation lists.
    pub fn covisibility_from_observations(&self) -> CovisibilityGraph {
        let mut g = CovisibilityGraph::default();
        for mp in self.points.values() {
            let obs: Vec<_> = mp.observers.iter().copied().collect();
            for (i, &a) in obs.iter().enumerate() {
                for &b in &obs[i + 1..] {
                    g.bump(a, b, 1);
                }
            }
        }
        g
    }

    /// Checks the cross-references between keyframes, points and the graph.
    pub fn check_consistency(&self) -> Result<(), String> {
        for kf in self.keyframes.values() {
            for pid in kf.observations.keys() {
                let mp = self
                    .points
                    .get(pid)
                    .ok_or_else(|| format!("keyframe {} observes missing point {pid}", kf.id))?;
                if !mp.observers.contains(&kf.id) {
                    return Err(format!("point {pid} does not list observer {}", kf.id));
                }
            }
        }
        for mp in self.points.values() {
            for kf in &mp.observers {
                let frame = self
                    .keyframes
                    .get(kf)
                    .ok_or_else(|| format!("point {} lists missing keyframe {kf}", mp.id))?;
                if !frame.observations.contains_key(&mp.id) {
                    return Err(format!(
                        "keyframe {kf} lacks observation of point {}",
                        mp.id
                    ));
                }
            }
        }
        if self.covisibility_from_observations() != self.covisibility {
            return Err("covisibility weights disagree with observation lists".into());
        }
        Ok(())
    }

    pub fn keyframe_poses(&self) -> BTreeMap<KeyframeId, RigidPose> {
        self.keyframes
            .iter()
            .map(|(id, kf)| (*id, kf.pose))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::NoiseConfig;
    use nalgebra::Vector2;

    fn obs() -> Observation {
        Observation::primary(Vector2::new(100.0, 100.0), &NoiseConfig::default()).unwrap()
    }

    #[test]
    fn covisibility_tracks_observations() {
        let mut m = Map::new();
        let a = m.add_keyframe(0.0, 0, RigidPose::identity());
        let b = m.add_keyframe(1.0, 1, RigidPose::identity());
        let c = m.add_keyframe(2.0, 2, RigidPose::identity());
        let p: Vec<_> = (0..5).map(|i| m.add_point(Vector3::zeros(), i)).collect();
        for &pid in &p {
            m.add_observation(a, pid, obs());
            m.add_observation(b, pid, obs());
        }
        m.add_observation(c, p[0], obs());
        assert_eq!(m.covisibility.weight(a, b), 5);
        assert_eq!(m.covisibility.weight(b, a), 5);
        assert_eq!(m.covisibility.weight(a, c), 1);
        m.check_consistency().unwrap();

        m.remove_observation(b, p[1]);
        assert_eq!(m.covisibility.weight(a, b), 4);
        m.remove_point(p[0]);
        assert_eq!(m.covisibility.weight(a, c), 0);
        assert_eq!(m.covisibility.weight(a, b), 3);
        m.check_consistency().unwrap();
    }

    #[test]
    fn duplicate_observation_is_idempotent() {
        let mut m = Map::new();
        let a = m.add_keyframe(0.0, 0, RigidPose::identity());
        let b = m.add_keyframe(1.0, 1, RigidPose::identity());
        let p = m.add_point(Vector3::zeros(), 0);
        m.add_observation(a, p, obs());
        m.add_observation(b, p, obs());
        m.add_observation(b, p, obs());
        assert_eq!(m.covisibility.weight(a, b), 1);
        m.check_consistency().unwrap();
    }
}
