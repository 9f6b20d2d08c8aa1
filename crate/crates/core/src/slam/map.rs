//! Keyframes, map points, pose graphs and the atlas.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::evaluation::TrajectorySample;
use crate::types::Pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: u64,
    pub position: Vector3<f64>,
    /// Keyframe index within the graph to observed pixel.
    pub observations: BTreeMap<usize, Vector2<f64>>,
    /// Frames in which the point was matched and survived pose optimization.
    pub found: u32,
    /// Frames in which the point was matched.
    pub visible: u32,
    pub first_keyframe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame_id: u64,
    pub t: f64,
    /// Camera-from-world.
    pub pose: Pose,
    /// Track id to pixel for every live track at this frame.
    pub features: BTreeMap<u64, Vector2<f64>>,
}

/// One gauge: poses, keyframes and map points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    /// `(t, camera-from-world)`, strictly increasing in time.
    pub poses: Vec<(f64, Pose)>,
    pub keyframes: Vec<Keyframe>,
    pub points: BTreeMap<u64, MapPoint>,
}

impl PoseGraph {
    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn push_pose(&mut self, t: f64, pose: Pose) -> bool {
        if self.poses.last().is_some_and(|(last, _)| t <= *last) {
            return false;
        }
        self.poses.push((t, pose));
        true
    }

    /// World-from-camera samples for export and evaluation.
    pub fn samples(&self) -> Vec<TrajectorySample> {
        self.poses
            .iter()
            .map(|(t, p)| TrajectorySample::new(*t, p.inverse()))
            .collect()
    }

    pub fn remove_point(&mut self, id: u64) -> Option<MapPoint> {
        self.points.remove(&id)
    }

    /// RMS reprojection error over all keyframe observations.
    pub fn rms_reprojection(&self, cam: &crate::types::CameraModel) -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for p in self.points.values() {
            for (k, px) in &p.observations {
                let pc = self.keyframes[*k].pose.transform_point(&p.position);
                if let Some(u) = crate::sfm::project_pinhole(cam, &pc) {
                    s += (u - px).norm_squared();
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (s / n as f64).sqrt())
    }
}

/// Disconnected pose graphs; the last one is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub graphs: Vec<PoseGraph>,
}

impl Default for Atlas {
    fn default() -> Self {
        Self {
            graphs: vec![PoseGraph::default()],
        }
    }
}

impl Atlas {
    pub fn active(&self) -> &PoseGraph {
        self.graphs.last().expect("atlas always has an active graph")
    }

    pub fn active_mut(&mut self) -> &mut PoseGraph {
        self.graphs.last_mut().expect("atlas always has an active graph")
    }

    /// Seals the active graph and starts an empty one.
    pub fn seal(&mut self) {
        self.graphs.push(PoseGraph::default());
    }

    /// Trajectories of all graphs that hold at least one pose.
    pub fn trajectories(&self) -> Vec<Vec<TrajectorySample>> {
        self.graphs.iter().filter(|g| !g.is_empty()).map(|g| g.samples()).collect()
    }
}
