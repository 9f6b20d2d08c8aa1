//! Feature-based monocular tracking and mapping on reconstructed frames.

pub mod map;
pub mod tracks;

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

pub use map::{Atlas, Keyframe, MapPoint, PoseGraph};
pub use tracks::{FeatureTrack, TrackConfig, TrackManager, TrackSnapshot, TrackUpdate};

use crate::sfm::{
    local_bundle_adjustment, optimize_pose, parallax_deg, project_pinhole, triangulate, two_view_init,
    BaConfig, BaObservation, BaProblem, PoseObservation, PoseOptConfig, TwoViewConfig, TwoViewResult, CHI2_2DOF,
};
use crate::types::{CameraModel, Pose, SpatialTwist};
use crate::vision::{build_pyramid, estimate_shift, ImageBuffer, Pyramid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    pub min_tracked_points: usize,
    /// Pixels since the last keyframe.
    pub max_median_displacement: f64,
    pub min_frames_between: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            min_tracked_points: 40,
            max_median_displacement: 20.0,
            min_frames_between: 1,
        }
    }
}

pub fn need_keyframe(tracked: usize, median_displacement: f64, frames_since: usize, policy: &KeyframePolicy) -> bool {
    frames_since >= policy.min_frames_between
        && (tracked < policy.min_tracked_points || median_displacement > policy.max_median_displacement)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub tracks: TrackConfig,
    pub keyframe: KeyframePolicy,
    pub two_view: TwoViewConfig,
    pub pose: PoseOptConfig,
    pub ba: BaConfig,
    /// Keyframes optimized by local BA; older observers stay fixed.
    pub ba_window: usize,
    pub lost_min_inliers: usize,
    pub lost_max_median_error: f64,
    pub cull_ratio: f64,
    /// Keyframes after creation before the observation-count rule applies.
    pub cull_age: usize,
    pub init_max_failures: usize,
    pub init_min_points: usize,
    /// Consecutive unlocalizable frames dropped before tracking counts as lost.
    pub lost_retries: usize,
    /// Largest global image shift searched when re-tracking a failed frame.
    pub recovery_max_shift: f64,
    /// Minimum parallax for points triangulated during mapping.
    pub min_parallax_deg: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            tracks: TrackConfig::default(),
            keyframe: KeyframePolicy::default(),
            two_view: TwoViewConfig::default(),
            pose: PoseOptConfig {
                min_inliers: 10,
                ..PoseOptConfig::default()
            },
            ba: BaConfig::default(),
            ba_window: 5,
            lost_min_inliers: 10,
            lost_max_median_error: 3.0,
            cull_ratio: 0.25,
            cull_age: 3,
            init_max_failures: 20,
            init_min_points: 30,
            lost_retries: 2,
            recovery_max_shift: 80.0,
            min_parallax_deg: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlamStatus {
    /// Frame unusable (too small for the pyramid).
    Skipped,
    Initializing,
    Initialized,
    Tracking,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub frame_id: u64,
    pub status: SlamStatus,
    /// Camera-from-world.
    pub pose: Option<Pose>,
    pub tracked: usize,
    pub keyframe: bool,
}

enum Phase {
    Initializing {
        reference: Option<(u64, f64)>,
        failures: usize,
    },
    Tracking,
}

pub struct Slam {
    cfg: SlamConfig,
    cam: CameraModel,
    atlas: Atlas,
    tracks: TrackManager,
    phase: Phase,
    next_frame: u64,
    next_point: u64,
    last_kf_frame: u64,
    /// Frames dropped in a row while tracking.
    retries: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

fn centre(pose: &Pose) -> nalgebra::Vector3<f64> {
    pose.inverse().translation
}

impl Slam {
    pub fn new(cfg: SlamConfig, cam: CameraModel) -> Self {
        Self {
            cfg,
            cam: cam.ideal(),
            atlas: Atlas::default(),
            tracks: TrackManager::new(),
            phase: Phase::Initializing {
                reference: None,
                failures: 0,
            },
            next_frame: 0,
            next_point: 0,
            last_kf_frame: 0,
            retries: 0,
        }
    }

    pub fn atlas(&self) -> &Atlas {
        &self.atlas
    }

    pub fn into_atlas(self) -> Atlas {
        self.atlas
    }

    pub fn is_tracking(&self) -> bool {
        matches!(self.phase, Phase::Tracking)
    }

    pub fn tracks(&self) -> &TrackManager {
        &self.tracks
    }

    /// Camera velocity from the last two poses of the active graph, as the
    /// per-second twist of the later-from-earlier transform.
    pub fn velocity(&self) -> Option<SpatialTwist> {
        if !self.is_tracking() {
            return None;
        }
        let p = &self.atlas.active().poses;
        let [(t1, a), (t2, b)] = p.get(p.len().checked_sub(2)?..)? else {
            return None;
        };
        let dt = t2 - t1;
        (dt > 0.0).then(|| b.compose(&a.inverse()).log().ok()).flatten().map(|v| v.scaled(1.0 / dt))
    }

    /// Median depth of the map points in front of the latest camera.
    pub fn scene_depth(&self) -> Option<f64> {
        let g = self.atlas.active();
        let (_, pose) = g.poses.last()?;
        median(
            g.points
                .values()
                .map(|p| pose.transform_point(&p.position).z)
                .filter(|z| *z > 0.0)
                .collect(),
        )
    }

    /// Processes one reconstructed frame taken at `t`.
    pub fn process(&mut self, t: f64, image: &ImageBuffer) -> FrameResult {
        let id = self.next_frame;
        self.next_frame += 1;
        let mut result = FrameResult {
            frame_id: id,
            status: SlamStatus::Skipped,
            pose: None,
            tracked: 0,
            keyframe: false,
        };
        let Ok(pyr) = build_pyramid(image, self.cfg.tracks.klt.levels, self.cfg.tracks.klt.window) else {
            return result;
        };
        let snapshot = matches!(self.phase, Phase::Tracking).then(|| self.tracks.snapshot());
        let guesses = self.projected_guesses(t);
        let spare = snapshot.is_some().then(|| pyr.clone());
        let up = self.tracks.update_with_guesses(id, pyr, &self.cfg.tracks, &guesses);
        debug!(
            "frame {id} t={t:.4}: tracks extended {}, killed {}, spawned {}, merged {}",
            up.extended,
            up.killed.len(),
            up.spawned.len(),
            up.merged.len()
        );
        match self.phase {
            Phase::Initializing { .. } => self.try_initialize(id, t, &mut result),
            Phase::Tracking => {
                let ok = self.track_frame(id, t, &mut result)
                    || match (&snapshot, spare) {
                        (Some(s), Some(p)) => self.recover(id, t, s.clone(), p, &mut result),
                        _ => false,
                    };
                if ok {
                    self.retries = 0;
                } else if self.retries < self.cfg.lost_retries {
                    // Drop this frame and track the next one from the last good frame.
                    self.retries += 1;
                    debug!("frame {id} t={t:.4} dropped ({} in a row)", self.retries);
                    if let Some(s) = snapshot {
                        self.tracks.restore(s);
                    }
                } else {
                    self.retries = 0;
                    self.on_tracking_lost(id, t, &mut result);
                }
            }
        }
        result
    }

    /// Second attempt after a failed frame: every track restarts KLT from the
    /// last good frame shifted by the best global image translation.
    fn recover(&mut self, id: u64, t: f64, snapshot: TrackSnapshot, pyr: Pyramid, out: &mut FrameResult) -> bool {
        self.tracks.restore(snapshot);
        let Some(prev) = self.tracks.previous() else { return false };
        let Some(d) = estimate_shift(prev.base(), pyr.base(), self.cfg.recovery_max_shift, 0.3) else {
            return false;
        };
        debug!("frame {id}: retrying with global shift ({:.0}, {:.0})", d.x, d.y);
        let guesses = self.tracks.tracks.values().map(|tr| (tr.id, tr.position() + d)).collect();
        self.tracks.update_with_guesses(id, pyr, &self.cfg.tracks, &guesses);
        self.track_frame(id, t, out)
    }

    /// Map-point tracks start KLT at the projection under the predicted pose.
    fn projected_guesses(&self, t: f64) -> BTreeMap<u64, Vector2<f64>> {
        let mut out = BTreeMap::new();
        if !matches!(self.phase, Phase::Tracking) {
            return out;
        }
        let pose = self.predict(t);
        let graph = self.atlas.active();
        for tr in self.tracks.tracks.values() {
            let Some(p) = tr.map_point.and_then(|pid| graph.points.get(&pid)) else { continue };
            if let Some(u) = project_pinhole(&self.cam, &pose.transform_point(&p.position)) {
                if u.iter().all(|v| v.is_finite()) {
                    out.insert(tr.id, u);
                }
            }
        }
        out
    }

    fn reseat(&mut self, id: u64, t: f64) {
        self.phase = Phase::Initializing {
            reference: Some((id, t)),
            failures: 0,
        };
    }

    fn try_initialize(&mut self, id: u64, t: f64, out: &mut FrameResult) {
        out.status = SlamStatus::Initializing;
        let Phase::Initializing { reference, failures } = self.phase else {
            unreachable!()
        };
        let Some((rf, rt)) = reference else {
            self.reseat(id, t);
            return;
        };
        let matched: Vec<(u64, Vector2<f64>, Vector2<f64>)> = self
            .tracks
            .tracks
            .values()
            .filter_map(|tr| tr.at(rf).map(|a| (tr.id, a, tr.position())))
            .collect();
        if matched.len() < 8 {
            debug!("init: {} tracks survive from reference, reseating", matched.len());
            self.reseat(id, t);
            return;
        }
        let pairs: Vec<_> = matched.iter().map(|m| (m.1, m.2)).collect();
        let fail = |s: &mut Self| {
            let failures = failures + 1;
            if failures >= s.cfg.init_max_failures {
                debug!("init: {failures} failures, reseating reference");
                s.reseat(id, t);
            } else {
                s.phase = Phase::Initializing { reference, failures };
            }
        };
        let tv = match two_view_init(&pairs, &self.cam, false, &self.cfg.two_view) {
            Ok(tv) => tv,
            Err(rej) => match self.disambiguate(rf, id, &matched, &rej.candidates) {
                Some(i) => rej.candidates.into_iter().nth(i).expect("index from candidates"),
                None => {
                    debug!("init: two-view rejected: {}", rej.reason);
                    fail(self);
                    return;
                }
            },
        };
        let mut graph = PoseGraph::default();
        graph.keyframes.push(Keyframe {
            frame_id: rf,
            t: rt,
            pose: Pose::identity(),
            features: matched.iter().map(|m| (m.0, m.1)).collect(),
        });
        graph.keyframes.push(Keyframe {
            frame_id: id,
            t,
            pose: tv.pose,
            features: self.tracks.tracks.values().map(|tr| (tr.id, tr.position())).collect(),
        });
        let mut assoc = Vec::new();
        for (k, m) in matched.iter().enumerate() {
            let (true, Some(p)) = (tv.inliers[k], tv.points[k]) else { continue };
            let pid = self.next_point;
            self.next_point += 1;
            graph.points.insert(
                pid,
                MapPoint {
                    id: pid,
                    position: p,
                    observations: BTreeMap::from([(0, m.1), (1, m.2)]),
                    found: 0,
                    visible: 0,
                    first_keyframe: 1,
                },
            );
            assoc.push((m.0, pid));
        }
        bundle_adjust(&mut graph, &self.cam, &[0, 1], &self.cfg.ba);
        enforce_gate(&mut graph, &self.cam);
        if graph.points.len() < self.cfg.init_min_points {
            debug!("init: only {} points after BA", graph.points.len());
            fail(self);
            return;
        }
        // Unit baseline pins the monocular scale.
        let b = graph.keyframes[1].pose.translation.norm();
        if !(b > 1e-9) {
            fail(self);
            return;
        }
        graph.keyframes[1].pose.translation /= b;
        for p in graph.points.values_mut() {
            p.position /= b;
        }
        graph.push_pose(rt, Pose::identity());
        graph.push_pose(t, graph.keyframes[1].pose);
        for (tid, pid) in assoc {
            if let Some(tr) = self.tracks.tracks.get_mut(&tid) {
                tr.map_point = graph.points.contains_key(&pid).then_some(pid);
            }
        }
        info!(
            "map initialized at t={t:.4} with {} points ({:?}, parallax {:.2} deg)",
            graph.points.len(),
            tv.model,
            tv.parallax_deg
        );
        *self.atlas.active_mut() = graph;
        self.phase = Phase::Tracking;
        self.last_kf_frame = id;
        out.status = SlamStatus::Initialized;
        out.pose = Some(self.atlas.active().keyframes[1].pose);
        out.tracked = self.atlas.active().points.len();
        out.keyframe = true;
    }

    /// Picks among equally supported two-view solutions (the planar two-fold
    /// ambiguity) by how well each structure explains the frames in between.
    fn disambiguate(
        &self,
        rf: u64,
        id: u64,
        matched: &[(u64, Vector2<f64>, Vector2<f64>)],
        candidates: &[TwoViewResult],
    ) -> Option<usize> {
        if candidates.len() < 2 || id <= rf + 1 {
            return None;
        }
        let cfg = PoseOptConfig {
            min_inliers: 4,
            ..self.cfg.pose
        };
        let mut totals = vec![0.0; candidates.len()];
        let mut used = 0;
        for f in rf + 1..id {
            let mut errs = Vec::with_capacity(candidates.len());
            for c in candidates {
                let obs: Vec<PoseObservation> = matched
                    .iter()
                    .zip(&c.points)
                    .filter_map(|(m, p)| Some(PoseObservation {
                        point: (*p)?,
                        pixel: self.tracks.tracks.get(&m.0)?.at(f)?,
                    }))
                    .collect();
                if obs.len() < 8 {
                    break;
                }
                let frac = (f - rf) as f64 / (id - rf) as f64;
                let guess = c.pose.log().map_or(Pose::identity(), |v| Pose::exp(&v, frac));
                let err = [guess, Pose::identity(), c.pose]
                    .iter()
                    .filter_map(|g| optimize_pose(g, &obs, &self.cam, &cfg).ok())
                    .filter_map(|o| {
                        median(
                            obs.iter()
                                .map(|ob| {
                                    project_pinhole(&self.cam, &o.pose.transform_point(&ob.point))
                                        .map_or(f64::INFINITY, |u| (u - ob.pixel).norm())
                                })
                                .collect(),
                        )
                    })
                    .fold(f64::INFINITY, f64::min);
                errs.push(err);
            }
            if errs.len() == candidates.len() {
                for (t, e) in totals.iter_mut().zip(errs) {
                    *t += e;
                }
                used += 1;
            }
        }
        if used == 0 {
            return None;
        }
        let mut order: Vec<usize> = (0..totals.len()).collect();
        order.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]));
        let (best, next) = (totals[order[0]], totals[order[1]]);
        debug!("init: disambiguation over {used} frames, errors {totals:?}");
        (best.is_finite() && 1.5 * best < next).then_some(order[0])
    }

    fn predict(&self, t: f64) -> Pose {
        let p = &self.atlas.active().poses;
        let (t2, b) = p[p.len() - 1];
        if p.len() < 2 {
            return b;
        }
        let (t1, a) = p[p.len() - 2];
        let (d_last, d_now) = (t2 - t1, t - t2);
        match b.compose(&a.inverse()).log() {
            Ok(v) if d_last > 0.0 => Pose::exp(&v, d_now / d_last).compose(&b),
            _ => b,
        }
    }

    /// Returns false when the frame cannot be localized; the caller decides
    /// whether that is a loss.
    fn track_frame(&mut self, id: u64, t: f64, out: &mut FrameResult) -> bool {
        let predicted = self.predict(t);
        let graph = self.atlas.active_mut();
        let mut ids = Vec::new();
        let mut obs = Vec::new();
        for tr in self.tracks.tracks.values_mut() {
            let Some(pid) = tr.map_point else { continue };
            match graph.points.get(&pid) {
                Some(p) => {
                    ids.push((tr.id, pid));
                    obs.push(PoseObservation {
                        point: p.position,
                        pixel: tr.position(),
                    });
                }
                None => tr.map_point = None,
            }
        }
        if obs.len() < self.cfg.lost_min_inliers {
            debug!("lost: {} map points tracked", obs.len());
            return false;
        }
        let opt = match optimize_pose(&predicted, &obs, &self.cam, &self.cfg.pose) {
            Ok(o) => o,
            Err(e) => {
                debug!("lost: pose optimization failed: {e}");
                return false;
            }
        };
        let errors: Vec<f64> = obs
            .iter()
            .map(|o| {
                project_pinhole(&self.cam, &opt.pose.transform_point(&o.point))
                    .map_or(f64::INFINITY, |u| (u - o.pixel).norm())
            })
            .collect();
        let med = median(errors).unwrap_or(f64::INFINITY);
        let inliers = opt.inlier_count();
        debug!(
            "frame {id} t={t:.4}: {} tracks, {} with points, {inliers} inliers, median error {med:.2} px",
            self.tracks.live(),
            obs.len()
        );
        if inliers < self.cfg.lost_min_inliers || med > self.cfg.lost_max_median_error {
            debug!("lost: {inliers} inliers, median error {med:.2} px");
            return false;
        }
        let pose = opt.pose;
        let graph = self.atlas.active_mut();
        for p in graph.points.values_mut() {
            let pc = pose.transform_point(&p.position);
            if project_pinhole(&self.cam, &pc).is_some_and(|u| self.cam.in_bounds(u.x, u.y)) {
                p.visible += 1;
            }
        }
        for (k, (tid, pid)) in ids.iter().enumerate() {
            if opt.inliers[k] {
                if let Some(p) = graph.points.get_mut(pid) {
                    p.found += 1;
                }
            } else if let Some(tr) = self.tracks.tracks.get_mut(tid) {
                tr.map_point = None;
            }
        }
        graph.push_pose(t, pose);
        out.status = SlamStatus::Tracking;
        out.pose = Some(pose);
        out.tracked = inliers;

        let last_kf = graph.keyframes.last().expect("tracking graphs have keyframes");
        let disp = median(
            self.tracks
                .tracks
                .values()
                .filter_map(|tr| last_kf.features.get(&tr.id).map(|p| (tr.position() - p).norm()))
                .collect(),
        )
        .unwrap_or(f64::INFINITY);
        let since = (id - self.last_kf_frame) as usize;
        if need_keyframe(inliers, disp, since, &self.cfg.keyframe) {
            self.insert_keyframe(id, t, pose, &ids, &opt.inliers);
            out.keyframe = true;
        }
        true
    }

    fn insert_keyframe(&mut self, id: u64, t: f64, pose: Pose, ids: &[(u64, u64)], inliers: &[bool]) {
        let graph = self.atlas.active_mut();
        let k = graph.keyframes.len();
        graph.keyframes.push(Keyframe {
            frame_id: id,
            t,
            pose,
            features: self.tracks.tracks.values().map(|tr| (tr.id, tr.position())).collect(),
        });
        for ((tid, pid), &ok) in ids.iter().zip(inliers) {
            let (true, Some(tr)) = (ok, self.tracks.tracks.get(tid)) else { continue };
            if let Some(p) = graph.points.get_mut(pid) {
                p.observations.insert(k, tr.position());
            }
        }
        self.last_kf_frame = id;
        self.local_mapping(k);
    }

    /// Culls weak points, triangulates new ones against recent keyframes and
    /// refines the recent keyframes with bundle adjustment.
    fn local_mapping(&mut self, k: usize) {
        let cfg = self.cfg;
        let graph = self.atlas.active_mut();
        graph.points.retain(|_, p| {
            let weak = p.visible > 0 && (p.found as f64) < cfg.cull_ratio * p.visible as f64;
            let lonely = k >= p.first_keyframe + cfg.cull_age && p.observations.len() < 2;
            !(weak || lonely)
        });

        let first = k.saturating_sub(cfg.ba_window.max(2) - 1);
        let kf = graph.keyframes[k].clone();
        let mut created = 0;
        for (tid, px) in &kf.features {
            let Some(tr) = self.tracks.tracks.get_mut(tid) else { continue };
            if tr.map_point.is_some_and(|pid| graph.points.contains_key(&pid)) {
                continue;
            }
            // Earliest covisible keyframe gives the widest baseline.
            let Some(j) = (first..k).find(|&j| graph.keyframes[j].features.contains_key(tid)) else {
                continue;
            };
            let other = &graph.keyframes[j];
            let Ok(x) = triangulate(&other.pose, &kf.pose, &other.features[tid], px, &self.cam) else {
                continue;
            };
            if parallax_deg(&centre(&other.pose), &centre(&kf.pose), &x) < cfg.min_parallax_deg {
                continue;
            }
            let mut observations = BTreeMap::new();
            for i in j..=k {
                let Some(u) = graph.keyframes[i].features.get(tid) else { continue };
                let pc = graph.keyframes[i].pose.transform_point(&x);
                if project_pinhole(&self.cam, &pc).is_some_and(|v| (v - u).norm_squared() <= CHI2_2DOF) {
                    observations.insert(i, *u);
                }
            }
            if observations.len() < 2 {
                continue;
            }
            let pid = self.next_point;
            self.next_point += 1;
            graph.points.insert(
                pid,
                MapPoint {
                    id: pid,
                    position: x,
                    observations,
                    found: 0,
                    visible: 0,
                    first_keyframe: k,
                },
            );
            tr.map_point = Some(pid);
            created += 1;
        }
        let window: Vec<usize> = (first..=k).collect();
        bundle_adjust(graph, &self.cam, &window, &cfg.ba);
        enforce_gate(graph, &self.cam);
        // Refresh the trajectory entry of the new keyframe after BA.
        let kp = graph.keyframes[k].pose;
        if let Some(last) = graph.poses.last_mut() {
            if last.0 == kf.t {
                last.1 = kp;
            }
        }
        for tr in self.tracks.tracks.values_mut() {
            if tr.map_point.is_some_and(|pid| !graph.points.contains_key(&pid)) {
                tr.map_point = None;
            }
        }
        debug!("keyframe {k}: {created} new points, {} in map", graph.points.len());
    }

    fn on_tracking_lost(&mut self, id: u64, t: f64, out: &mut FrameResult) {
        info!("tracking lost at t={t:.4}; starting a new pose graph");
        self.atlas.seal();
        for tr in self.tracks.tracks.values_mut() {
            tr.map_point = None;
        }
        self.reseat(id, t);
        out.status = SlamStatus::Lost;
        out.pose = None;
    }
}

/// Runs BA with the `window` keyframes free (keyframe 0 always fixed) over
/// every point they observe; removes gated observations afterwards.
fn bundle_adjust(graph: &mut PoseGraph, cam: &CameraModel, window: &[usize], cfg: &BaConfig) {
    let free: BTreeSet<usize> = window.iter().copied().filter(|&k| k != 0).collect();
    let pids: Vec<u64> = graph
        .points
        .values()
        .filter(|p| p.observations.keys().any(|k| window.contains(k)))
        .map(|p| p.id)
        .collect();
    if pids.is_empty() || free.is_empty() {
        return;
    }
    let mut kf_index: BTreeMap<usize, usize> = BTreeMap::new();
    let mut problem = BaProblem::default();
    let mut refs = Vec::new();
    for (pi, pid) in pids.iter().enumerate() {
        let p = &graph.points[pid];
        problem.points.push(p.position);
        for (k, px) in &p.observations {
            let idx = *kf_index.entry(*k).or_insert_with(|| {
                problem.poses.push(graph.keyframes[*k].pose);
                problem.fixed.push(!free.contains(k));
                problem.poses.len() - 1
            });
            problem.observations.push(BaObservation {
                pose: idx,
                point: pi,
                pixel: *px,
                weight: 1.0,
            });
            refs.push((*pid, *k));
        }
    }
    let report = match local_bundle_adjustment(&mut problem, cam, cfg) {
        Ok(r) => r,
        Err(e) => {
            debug!("local BA skipped: {e}");
            return;
        }
    };
    if report.rolled_back {
        debug!("local BA diverged and was rolled back");
    }
    for (k, idx) in &kf_index {
        if free.contains(k) {
            graph.keyframes[*k].pose = problem.poses[*idx];
        }
    }
    for (pi, pid) in pids.iter().enumerate() {
        if let Some(p) = graph.points.get_mut(pid) {
            p.position = problem.points[pi];
        }
    }
    for ((pid, k), &bad) in refs.iter().zip(&report.outliers) {
        if bad {
            if let Some(p) = graph.points.get_mut(pid) {
                p.observations.remove(k);
            }
        }
    }
}

/// Drops observations outside the chi-square gate and points left with
/// fewer than two observations.
fn enforce_gate(graph: &mut PoseGraph, cam: &CameraModel) {
    let kfs = &graph.keyframes;
    graph.points.retain(|_, p| {
        let pos = p.position;
        p.observations.retain(|k, u| {
            project_pinhole(cam, &kfs[*k].pose.transform_point(&pos)).is_some_and(|v| (v - *u).norm_squared() <= CHI2_2DOF)
        });
        p.observations.len() >= 2
    });
}
