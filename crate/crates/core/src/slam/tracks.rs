//! Feature tracks over consecutive frames.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::vision::{detect_fast, klt_track_with_guesses, FastConfig, KltConfig, Pyramid};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    /// `(frame id, pixel)`, frame ids strictly increasing.
    pub observations: Vec<(u64, Vector2<f64>)>,
    pub map_point: Option<u64>,
}

impl FeatureTrack {
    pub fn position(&self) -> Vector2<f64> {
        self.observations.last().expect("tracks are created with an observation").1
    }

    pub fn last_frame(&self) -> u64 {
        self.observations.last().expect("tracks are created with an observation").0
    }

    /// Displacement over the last step, zero for fresh tracks.
    pub fn last_step(&self) -> Vector2<f64> {
        match self.observations.as_slice() {
            [.., (fa, a), (fb, b)] if fb - fa == 1 => b - a,
            _ => Vector2::zeros(),
        }
    }

    pub fn at(&self, frame: u64) -> Option<Vector2<f64>> {
        self.observations
            .binary_search_by_key(&frame, |o| o.0)
            .ok()
            .map(|i| self.observations[i].1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub fast: FastConfig,
    pub klt: KltConfig,
    /// New features are detected while fewer tracks than this are alive.
    pub target: usize,
    pub merge_radius: f64,
    /// Observations older than this many frames are dropped.
    pub history: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            fast: FastConfig::default(),
            klt: KltConfig::default(),
            target: 150,
            merge_radius: 1.0,
            history: 400,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackUpdate {
    pub extended: usize,
    pub killed: Vec<u64>,
    pub spawned: Vec<u64>,
    /// `(removed, survivor)`.
    pub merged: Vec<(u64, u64)>,
}

/// Saved track state, see [`TrackManager::snapshot`].
#[derive(Clone)]
pub struct TrackSnapshot {
    tracks: BTreeMap<u64, FeatureTrack>,
    prev: Option<Pyramid>,
}

/// Live tracks only; failed tracks are dropped immediately.
#[derive(Default)]
pub struct TrackManager {
    pub tracks: BTreeMap<u64, FeatureTrack>,
    next_id: u64,
    prev: Option<Pyramid>,
}

impl TrackManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.tracks.len()
    }

    /// Extends tracks into `frame` by KLT from the previous frame, merges
    /// coincident tracks and tops up features in empty grid cells.
    pub fn update(&mut self, frame: u64, pyramid: Pyramid, cfg: &TrackConfig) -> TrackUpdate {
        self.update_with_guesses(frame, pyramid, cfg, &BTreeMap::new())
    }

    /// Like [`update`](Self::update); tracks in `guesses` start KLT at the
    /// given pixel, the others at their last position plus their last step.
    pub fn update_with_guesses(
        &mut self,
        frame: u64,
        pyramid: Pyramid,
        cfg: &TrackConfig,
        guesses: &BTreeMap<u64, Vector2<f64>>,
    ) -> TrackUpdate {
        let mut up = TrackUpdate::default();
        if let Some(prev) = &self.prev {
            let ids: Vec<u64> = self.tracks.keys().copied().collect();
            let pts: Vec<Vector2<f64>> = self.tracks.values().map(|t| t.position()).collect();
            let init: Vec<Vector2<f64>> = self
                .tracks
                .values()
                .map(|t| guesses.get(&t.id).copied().unwrap_or_else(|| t.position() + t.last_step()))
                .collect();
            let res = klt_track_with_guesses(prev, &pyramid, &pts, &init, &cfg.klt);
            for (id, r) in ids.into_iter().zip(res) {
                if r.ok() {
                    let tr = self.tracks.get_mut(&id).unwrap();
                    tr.observations.push((frame, r.position));
                    if tr.observations.len() > cfg.history {
                        tr.observations.remove(0);
                    }
                    up.extended += 1;
                } else {
                    self.tracks.remove(&id);
                    up.killed.push(id);
                }
            }
        } else {
            up.killed.extend(self.tracks.keys().copied());
            self.tracks.clear();
        }
        up.merged = self.merge(cfg.merge_radius);
        if self.tracks.len() < cfg.target {
            up.spawned = self.spawn(frame, pyramid.base(), cfg);
        }
        self.prev = Some(pyramid);
        up
    }

    /// Pyramid of the last processed frame.
    pub fn previous(&self) -> Option<&Pyramid> {
        self.prev.as_ref()
    }

    pub fn snapshot(&self) -> TrackSnapshot {
        TrackSnapshot {
            tracks: self.tracks.clone(),
            prev: self.prev.clone(),
        }
    }

    /// Rolls back to `s`; track ids stay unique.
    pub fn restore(&mut self, s: TrackSnapshot) {
        self.tracks = s.tracks;
        self.prev = s.prev;
    }

    /// Forgets the previous frame so the next update starts fresh tracks.
    pub fn reset(&mut self) {
        self.tracks.clear();
        self.prev = None;
    }

    fn merge(&mut self, radius: f64) -> Vec<(u64, u64)> {
        let ids: Vec<u64> = self.tracks.keys().copied().collect();
        let mut merged = Vec::new();
        let r2 = radius * radius;
        for (a_i, &a) in ids.iter().enumerate() {
            if !self.tracks.contains_key(&a) {
                continue;
            }
            let pa = self.tracks[&a].position();
            for &b in &ids[a_i + 1..] {
                let Some(tb) = self.tracks.get(&b) else { continue };
                if (tb.position() - pa).norm_squared() <= r2 {
                    // Ids grow with age, so `a` is the elder.
                    let tb = self.tracks.remove(&b).unwrap();
                    let ta = self.tracks.get_mut(&a).unwrap();
                    if ta.map_point.is_none() {
                        ta.map_point = tb.map_point;
                    }
                    merged.push((b, a));
                }
            }
        }
        merged
    }

    fn spawn(&mut self, frame: u64, img: &crate::vision::ImageBuffer, cfg: &TrackConfig) -> Vec<u64> {
        let (cols, rows) = (cfg.fast.grid_cols.max(1), cfg.fast.grid_rows.max(1));
        let (w, h) = (img.width() as f64, img.height() as f64);
        let cell = |p: &Vector2<f64>| -> usize {
            let cx = ((p.x / w * cols as f64) as usize).min(cols - 1);
            let cy = ((p.y / h * rows as f64) as usize).min(rows - 1);
            cy * cols + cx
        };
        let mut occupied = vec![false; cols * rows];
        for t in self.tracks.values() {
            occupied[cell(&t.position())] = true;
        }
        // KLT needs the full window at the coarsest level.
        let margin = ((cfg.klt.window / 2 + 1) << cfg.klt.levels.saturating_sub(1)) as f64;
        let mut out = Vec::new();
        for c in detect_fast(img, &cfg.fast) {
            if self.tracks.len() >= cfg.target {
                break;
            }
            let p = Vector2::new(c.x as f64, c.y as f64);
            if p.x < margin || p.y < margin || p.x > w - 1.0 - margin || p.y > h - 1.0 - margin {
                continue;
            }
            if occupied[cell(&p)] {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.insert(
                id,
                FeatureTrack {
                    id,
                    observations: vec![(frame, p)],
                    map_point: None,
                },
            );
            out.push(id);
        }
        out
    }
}
