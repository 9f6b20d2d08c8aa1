//! Adaptive event window selection.
//!
//! Events arrive in tiny windows of `N_e` events. Each accepted tiny window
//! becomes a tiny frame whose features are tracked against a reference; once
//! the features have moved far enough the accumulated events form one
//! reconstruction window.

use log::{debug, trace};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mci::{fit_2d_motion, MotionFitConfig, MotionPriors, PosePrior, TrackSet, TwoViewPrior};
use crate::sfm::{two_view_init, TwoViewConfig};
use crate::types::{CameraModel, Event, PlanarGroup, PlanarTwist, Pose, SpatialTwist};
use crate::vision::{
    build_pyramid, detect_fast, klt_track, normalize_min_max, splat_events, FastConfig, KltConfig,
    Pyramid, SplatConfig,
};

pub const MIN_WINDOW_EVENTS: usize = 200;
pub const MAX_WINDOW_EVENTS: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectorError {
    #[error("no tracked features")]
    NoTracks,
    #[error("point lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid selector configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// Initial tiny window size in events.
    pub n_e: usize,
    /// Expected tiny frames per reconstruction window.
    pub n_x: usize,
    /// Minimum event rate in events per pixel per second.
    pub th_e: f64,
    /// Median feature displacement (pixels) that triggers reconstruction.
    pub th_fd: f64,
    /// Tiny frames after which a low-rate window still produces an image.
    pub th_nf: usize,
    /// Fraction of a reconstruction window carried into the next one.
    pub overlap: f64,
    pub group: PlanarGroup,
    pub fast: FastConfig,
    pub klt: KltConfig,
    pub splat: SplatConfig,
    pub two_view: TwoViewConfig,
    pub motion: MotionFitConfig,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            n_e: 2000,
            n_x: 3,
            th_e: 1.0,
            th_fd: 5.0,
            th_nf: 6,
            overlap: 0.5,
            group: PlanarGroup::Sim2,
            fast: FastConfig::default(),
            klt: KltConfig::default(),
            splat: SplatConfig::default(),
            two_view: TwoViewConfig::default(),
            motion: MotionFitConfig::default(),
        }
    }
}

impl SelectorConfig {
    /// Defaults with the initial window size scaled for the sensor.
    pub fn for_sensor(width: u32, height: u32) -> Self {
        let n_e = if width as u64 * height as u64 >= 346 * 260 { 6000 } else { 2000 };
        Self { n_e, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        let bad = |m: &str| Err(SelectorError::InvalidConfig(m.into()));
        if self.n_e == 0 || self.n_x == 0 || self.th_nf == 0 {
            return bad("n_e, n_x and th_nf must be positive");
        }
        if !(self.th_e > 0.0 && self.th_fd > 0.0) {
            return bad("th_e and th_fd must be positive");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1)");
        }
        self.klt.validate().map_err(|e| SelectorError::InvalidConfig(e.to_string()))
    }
}

/// Events per pixel per second; `None` when the window has no duration.
pub fn event_rate(window: &[Event], width: u32, height: u32) -> Option<f64> {
    if window.len() < 2 {
        return None;
    }
    let dt = window[window.len() - 1].t - window[0].t;
    if !(dt > 0.0) {
        return None;
    }
    Some(window.len() as f64 / (dt * width as f64 * height as f64))
}

/// Lower median of the distances between matched points.
pub fn median_feature_displacement(
    reference: &[Vector2<f64>],
    current: &[Vector2<f64>],
) -> Result<f64, SelectorError> {
    if reference.len() != current.len() {
        return Err(SelectorError::LengthMismatch(reference.len(), current.len()));
    }
    if reference.is_empty() {
        return Err(SelectorError::NoTracks);
    }
    let mut d: Vec<f64> = reference.iter().zip(current).map(|(a, b)| (a - b).norm()).collect();
    let k = (d.len() - 1) / 2;
    let (_, m, _) = d.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

/// `floor(N_f * N_e / N_x)` clamped to the supported window range.
pub fn update_window_size(n_f: usize, n_x: usize, n_e: usize) -> usize {
    let n = (n_f as u128 * n_e as u128) / n_x.max(1) as u128;
    (n.min(MAX_WINDOW_EVENTS as u128) as usize).max(MIN_WINDOW_EVENTS)
}

#[derive(Clone, Debug)]
pub struct ReconstructionWindow {
    pub events: Vec<Event>,
    pub priors: MotionPriors,
    /// Tiny frames accumulated, including the reference.
    pub n_frames: usize,
    pub forced: bool,
}

impl ReconstructionWindow {
    pub fn t_ref(&self) -> Option<f64> {
        self.events.last().map(|e| e.t)
    }
}

#[derive(Clone, Debug)]
pub enum SelectorDecision {
    RejectedNoisy,
    ReferenceInitialized,
    Accumulating { displacement: f64 },
    Trigger(ReconstructionWindow),
    Forced(ReconstructionWindow),
}

struct Reference {
    t: f64,
    points: Vec<Vector2<f64>>,
}

struct Chain {
    pyramid: Pyramid,
    /// Current position of each reference feature, `None` once lost.
    positions: Vec<Option<Vector2<f64>>>,
    t: f64,
}

/// Sequential state machine over tiny windows.
pub struct WindowSelector {
    cfg: SelectorConfig,
    cam: CameraModel,
    n_e: usize,
    reference: Option<Reference>,
    chain: Option<Chain>,
    accumulated: Vec<Event>,
    n_f: usize,
    model_2d: Option<PlanarTwist>,
    velocity: Option<(SpatialTwist, Option<f64>)>,
}

impl WindowSelector {
    pub fn new(cfg: SelectorConfig, cam: CameraModel) -> Result<Self, SelectorError> {
        cfg.validate()?;
        Ok(Self {
            n_e: cfg.n_e.clamp(MIN_WINDOW_EVENTS, MAX_WINDOW_EVENTS),
            cfg,
            cam: cam.ideal(),
            reference: None,
            chain: None,
            accumulated: Vec::new(),
            n_f: 0,
            model_2d: None,
            velocity: None,
        })
    }

    /// Size of the next tiny window.
    pub fn window_size(&self) -> usize {
        self.n_e
    }

    pub fn frames(&self) -> usize {
        self.n_f
    }

    pub fn accumulated(&self) -> usize {
        self.accumulated.len()
    }

    pub fn model_2d(&self) -> Option<&PlanarTwist> {
        self.model_2d.as_ref()
    }

    /// Latest camera velocity from tracking and the scene depth it sees.
    pub fn set_velocity_prior(&mut self, velocity: Option<SpatialTwist>, scene_depth: Option<f64>) {
        self.velocity = velocity.map(|v| (v, scene_depth));
    }

    fn reset(&mut self) {
        self.reference = None;
        self.chain = None;
        self.accumulated.clear();
        self.n_f = 0;
    }

    fn tiny_pyramid(&self, events: &[Event]) -> Option<Pyramid> {
        let (w, h) = (self.cam.width as usize, self.cam.height as usize);
        let img = normalize_min_max(&splat_events(events, &self.cfg.splat, w, h));
        build_pyramid(&img, self.cfg.klt.levels, self.cfg.klt.window).ok()
    }

    fn seat_reference(&mut self, pyramid: Pyramid, t: f64) {
        let points: Vec<Vector2<f64>> = detect_fast(pyramid.base(), &self.cfg.fast)
            .iter()
            .map(|c| Vector2::new(c.x as f64, c.y as f64))
            .collect();
        debug!("reference tiny frame at {t:.6} with {} features", points.len());
        self.chain = Some(Chain {
            pyramid,
            positions: points.iter().copied().map(Some).collect(),
            t,
        });
        self.reference = Some(Reference { t, points });
    }

    /// Consumes the next tiny window (normally `window_size()` events).
    pub fn step(&mut self, events: &[Event]) -> SelectorDecision {
        let rate = event_rate(events, self.cam.width, self.cam.height);
        if !rate.is_some_and(|r| r >= self.cfg.th_e) {
            if self.n_f >= self.cfg.th_nf && !self.accumulated.is_empty() {
                let w = self.emit(true, None);
                return SelectorDecision::Forced(w);
            }
            trace!("tiny window rejected, rate {rate:?}");
            self.reset();
            return SelectorDecision::RejectedNoisy;
        }
        let t = events[events.len() - 1].t;
        let Some(pyramid) = self.tiny_pyramid(events) else {
            self.reset();
            return SelectorDecision::RejectedNoisy;
        };
        self.accumulated.extend_from_slice(events);
        self.n_f += 1;
        if self.reference.is_none() {
            self.seat_reference(pyramid, t);
            return SelectorDecision::ReferenceInitialized;
        }
        // Chained tracking: each tiny frame is tracked from the previous one.
        let chain = self.chain.as_mut().expect("chain exists with a reference");
        let alive: Vec<usize> = (0..chain.positions.len()).filter(|&i| chain.positions[i].is_some()).collect();
        let from: Vec<Vector2<f64>> = alive.iter().map(|&i| chain.positions[i].unwrap()).collect();
        let results = klt_track(&chain.pyramid, &pyramid, &from, &self.cfg.klt);
        for (&i, r) in alive.iter().zip(&results) {
            chain.positions[i] = r.ok().then_some(r.position);
        }
        chain.pyramid = pyramid;
        chain.t = t;
        let reference = self.reference.as_ref().unwrap();
        let (ref_pts, cur_pts): (Vec<_>, Vec<_>) = reference
            .points
            .iter()
            .zip(&chain.positions)
            .filter_map(|(a, b)| b.map(|b| (*a, b)))
            .unzip();
        let m_fd = match median_feature_displacement(&ref_pts, &cur_pts) {
            Ok(m) => m,
            Err(_) => {
                // Tracking collapsed: restart from this tiny frame.
                debug!("tracks lost after {} tiny frames, reseating reference", self.n_f);
                let keep = events.to_vec();
                self.reset();
                self.accumulated = keep;
                self.n_f = 1;
                let pyr = self.tiny_pyramid(events).expect("pyramid built above");
                self.seat_reference(pyr, t);
                return SelectorDecision::ReferenceInitialized;
            }
        };
        if m_fd > self.cfg.th_fd {
            let matches: Vec<_> = ref_pts.into_iter().zip(cur_pts).collect();
            let w = self.emit(false, Some(matches));
            return SelectorDecision::Trigger(w);
        }
        SelectorDecision::Accumulating { displacement: m_fd }
    }

    /// Flushes whatever has been accumulated as a forced window, if any.
    pub fn flush(&mut self) -> Option<ReconstructionWindow> {
        (!self.accumulated.is_empty()).then(|| self.emit(true, None))
    }

    fn priors(&mut self, matches: Option<Vec<(Vector2<f64>, Vector2<f64>)>>, span: f64) -> MotionPriors {
        let mut priors = MotionPriors {
            model_2d: self.model_2d,
            ..Default::default()
        };
        if let Some((v, depth)) = self.velocity {
            if span > 0.0 {
                priors.pose_prior = Some(PosePrior {
                    relative: Pose::exp(&v, span),
                    dt: span,
                    scene_depth: depth,
                });
            }
        }
        let (Some(mut matches), Some(reference), Some(chain)) = (matches, &self.reference, &self.chain) else {
            return priors;
        };
        let dt = chain.t - reference.t;
        if !(dt > 0.0) {
            return priors;
        }
        // Relaxed two-view test; its RANSAC mask also cleans the tracks.
        match two_view_init(&matches, &self.cam, true, &self.cfg.two_view) {
            Ok(tv) => {
                let (mut points, mut obs) = (Vec::new(), Vec::new());
                for (m, p) in matches.iter().zip(&tv.points) {
                    if let Some(p) = p {
                        points.push(*p);
                        obs.push(*m);
                    }
                }
                matches = matches.iter().zip(&tv.inliers).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
                priors.two_view = Some(TwoViewPrior {
                    relative: tv.pose,
                    points,
                    observations: obs,
                    dt,
                });
            }
            Err(rej) => {
                trace!("relaxed two-view rejected: {}", rej.reason);
                if let Some(mask) = rej.inliers.filter(|m| m.iter().filter(|&&k| k).count() >= 8) {
                    matches = matches.iter().zip(&mask).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
                }
            }
        }
        match fit_2d_motion(&matches, &self.cam, dt, self.cfg.group, self.model_2d.as_ref(), &self.cfg.motion) {
            Ok(fit) => self.model_2d = Some(fit.twist),
            Err(e) => debug!("planar fit failed: {e}"),
        }
        priors.tracks = Some(TrackSet { matches, dt });
        priors
    }

    fn emit(&mut self, forced: bool, matches: Option<Vec<(Vector2<f64>, Vector2<f64>)>>) -> ReconstructionWindow {
        let span = match (self.accumulated.first(), self.accumulated.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        };
        let priors = self.priors(matches, span);
        let n_frames = self.n_f;
        if !forced {
            self.n_e = update_window_size(n_frames, self.cfg.n_x, self.n_e);
        }
        let events = std::mem::take(&mut self.accumulated);
        let keep = ((events.len() as f64) * self.cfg.overlap).floor() as usize;
        let tail = events[events.len() - keep..].to_vec();
        self.reset();
        if !forced {
            self.accumulated = tail;
        }
        debug!(
            "{} window: {} events over {n_frames} tiny frames, next N_e {}",
            if forced { "forced" } else { "triggered" },
            events.len(),
            self.n_e
        );
        ReconstructionWindow {
            events,
            priors,
            n_frames,
            forced,
        }
    }
}
