//! Orchestration: events → window selector → MCI reconstruction → SLAM.

use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, AtlasManifest, IoError};
use crate::mci::{best_index, reconstruct_hypotheses, select_best, Hypothesis, MciCandidate, MciConfig};
use crate::selector::{ReconstructionWindow, SelectorConfig, SelectorDecision, SelectorError, WindowSelector};
use crate::slam::{Atlas, FrameResult, Slam, SlamConfig, SlamStatus};
use crate::types::{CameraModel, Event, RectificationMap, SpatialTwist};
use crate::vision::ImageBuffer;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Selector(#[from] SelectorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    /// One thread of control; deterministic.
    #[default]
    Sequential,
    /// Hypotheses on worker threads and SLAM on its own thread, fed
    /// through a channel.
    Concurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub camera: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub mode: ExecutionMode,
    /// Seeds every RANSAC in the pipeline.
    pub seed: u64,
    /// Write the selected MCI of every window as PGM.
    pub debug_images: bool,
    pub selector: SelectorConfig,
    pub mci: MciConfig,
    pub slam: SlamConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: None,
            events: None,
            output: None,
            mode: ExecutionMode::Sequential,
            seed: 0,
            debug_images: false,
            selector: SelectorConfig::default(),
            mci: MciConfig::default(),
            slam: SlamConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults with the initial window size chosen for the sensor.
    pub fn for_camera(cam: &CameraModel) -> Self {
        Self {
            selector: SelectorConfig::for_sensor(cam.width, cam.height),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.selector.validate()?;
        for (name, path) in [("camera", &self.camera), ("events", &self.events)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(PipelineError::Config(format!("{name} file {} does not exist", p.display())));
                }
            }
        }
        if self.mci.patch == 0 {
            return Err(PipelineError::Config("mci.patch must be positive".into()));
        }
        if self.slam.ba_window < 2 {
            return Err(PipelineError::Config("slam.ba_window must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.slam.cull_ratio) {
            return Err(PipelineError::Config("slam.cull_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Copies the pipeline-level seed and mode into the stage configs.
    fn effective(&self) -> (SelectorConfig, MciConfig, SlamConfig) {
        let mut sel = self.selector;
        let mut mci = self.mci;
        let mut slam = self.slam;
        sel.two_view.seed = self.seed;
        slam.two_view.seed = self.seed.wrapping_add(1);
        mci.concurrent = self.mode == ExecutionMode::Concurrent;
        (sel, mci, slam)
    }
}

/// Wall-clock statistics of one stage, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub count: usize,
    pub total_ms: f64,
    pub max_ms: f64,
}

impl TimingStat {
    pub fn add(&mut self, ms: f64) {
        self.count += 1;
        self.total_ms += ms;
        self.max_ms = self.max_ms.max(ms);
    }

    pub fn mean_ms(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_ms / self.count as f64
        }
    }
}

/// Per-stage timings: selector per tiny frame, reconstruction per MCI and
/// tracking/mapping per MCI.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub l1_per_tiny_frame: TimingStat,
    pub mth_per_mci: TimingStat,
    pub l2_per_mci: TimingStat,
}

impl Timings {
    /// Table of mean times in milliseconds.
    pub fn table(&self) -> String {
        format!(
            "{:<10} {:>10} {:>10} {:>10}\n{:<10} {:>10.3} {:>10.3} {:>10.3}\n{:<10} {:>10} {:>10} {:>10}\n",
            "",
            "MTH/MCI",
            "L1/TF",
            "L2/MCI",
            "mean ms",
            self.mth_per_mci.mean_ms(),
            self.l1_per_tiny_frame.mean_ms(),
            self.l2_per_mci.mean_ms(),
            "count",
            self.mth_per_mci.count,
            self.l1_per_tiny_frame.count,
            self.l2_per_mci.count,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub events: usize,
    pub tiny_frames: usize,
    pub rejected_tiny_frames: usize,
    pub mcis: usize,
    pub forced_mcis: usize,
    pub keyframes: usize,
    pub lost: usize,
    pub initializations: usize,
    /// Selected hypothesis counts in H1, H2, H3, H4 order.
    pub hypotheses: [usize; 4],
    /// `(time, tiny window size)` after every reconstruction window.
    pub window_sizes: Vec<(f64, usize)>,
}

/// Summary of one reconstruction window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MciRecord {
    pub t_ref: f64,
    pub t_start: f64,
    pub events: usize,
    pub tiny_frames: usize,
    pub forced: bool,
    pub hypothesis: Hypothesis,
    pub score: f64,
    /// Sharpness of the uncompensated histogram of the same window.
    pub uncompensated_score: f64,
}

pub struct PipelineOutput {
    pub atlas: Atlas,
    pub stats: PipelineStats,
    pub timings: Timings,
    pub records: Vec<MciRecord>,
}

/// Called with every window's record and all its candidates before the
/// best one is selected.
pub type MciObserver<'a> = dyn FnMut(&MciRecord, &[MciCandidate]) + 'a;

fn hypothesis_index(h: Hypothesis) -> usize {
    match h {
        Hypothesis::H1 => 0,
        Hypothesis::H2 => 1,
        Hypothesis::H3 => 2,
        Hypothesis::H4 => 3,
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

type Prior = (Option<SpatialTwist>, Option<f64>);

enum Tracker<'s> {
    Inline(Slam),
    Threaded {
        tx: mpsc::SyncSender<(f64, ImageBuffer)>,
        prior: Arc<Mutex<Prior>>,
        handle: std::thread::ScopedJoinHandle<'s, (Slam, Vec<FrameResult>, TimingStat)>,
    },
}

struct Run<'a, 'o> {
    cam: CameraModel,
    mci: MciConfig,
    stats: PipelineStats,
    timings: Timings,
    records: Vec<MciRecord>,
    results: Vec<FrameResult>,
    last_t: f64,
    images: Option<PathBuf>,
    observer: Option<&'a mut MciObserver<'o>>,
}

impl Run<'_, '_> {
    fn window(&mut self, w: ReconstructionWindow, selector: &mut WindowSelector, tracker: &mut Tracker) {
        let (Some(t_ref), Some(t_start)) = (w.t_ref(), w.events.first().map(|e| e.t)) else {
            return;
        };
        if t_ref <= self.last_t {
            debug!("window ending at {t_ref:.6} adds no new events, skipped");
            return;
        }
        let start = Instant::now();
        let candidates = match reconstruct_hypotheses(&w.events, &w.priors, &self.cam, &self.mci) {
            Ok(c) => c,
            Err(e) => {
                debug!("reconstruction failed: {e}");
                return;
            }
        };
        let uncompensated_score = candidates
            .iter()
            .find(|c| c.hypothesis == Hypothesis::H4)
            .map_or(f64::NAN, |c| c.score);
        let mut record = MciRecord {
            t_ref,
            t_start,
            events: w.events.len(),
            tiny_frames: w.n_frames,
            forced: w.forced,
            hypothesis: Hypothesis::H4,
            score: uncompensated_score,
            uncompensated_score,
        };
        if let Some(i) = best_index(&candidates) {
            record.hypothesis = candidates[i].hypothesis;
            record.score = candidates[i].score;
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(&record, &candidates);
        }
        let Ok(best) = select_best(candidates) else { return };
        let image = best.normalized();
        self.timings.mth_per_mci.add(ms(start));
        if let Some(dir) = &self.images {
            let path = dir.join(format!("mci_{:05}.pgm", self.stats.mcis));
            if let Err(e) = image.write_pgm(&path) {
                log::warn!("could not write {}: {e}", path.display());
            }
        }
        self.last_t = t_ref;
        self.stats.mcis += 1;
        self.stats.forced_mcis += usize::from(w.forced);
        self.stats.hypotheses[hypothesis_index(record.hypothesis)] += 1;
        self.stats.window_sizes.push((t_ref, selector.window_size()));
        self.records.push(record);

        match tracker {
            Tracker::Inline(slam) => {
                let start = Instant::now();
                let r = slam.process(t_ref, &image);
                self.timings.l2_per_mci.add(ms(start));
                self.results.push(r);
                selector.set_velocity_prior(slam.velocity(), slam.scene_depth());
            }
            Tracker::Threaded { tx, prior, .. } => {
                // A closed channel means the worker panicked; join reports it.
                let _ = tx.send((t_ref, image));
                let (v, d) = *prior.lock().expect("prior lock");
                selector.set_velocity_prior(v, d);
            }
        }
    }
}

/// Runs the pipeline over an event stream. `cam` may carry distortion; events
/// are then rectified before use.
pub fn run_events<I>(
    events: I,
    cam: &CameraModel,
    cfg: &PipelineConfig,
    observer: Option<&mut MciObserver<'_>>,
) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Event, IoError>>,
{
    cfg.validate()?;
    cam.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let (sel_cfg, mci_cfg, slam_cfg) = cfg.effective();
    let rect = (!cam.distortion.is_zero()).then(|| RectificationMap::new(cam));
    let ideal = cam.ideal();
    let mut selector = WindowSelector::new(sel_cfg, ideal)?;
    let images = match (&cfg.output, cfg.debug_images) {
        (Some(out), true) => {
            let dir = out.join("mci");
            std::fs::create_dir_all(&dir).map_err(|source| IoError::Io {
                path: dir.clone(),
                source,
            })?;
            Some(dir)
        }
        _ => None,
    };
    let mut run = Run {
        cam: ideal,
        mci: mci_cfg,
        stats: PipelineStats::default(),
        timings: Timings::default(),
        records: Vec::new(),
        results: Vec::new(),
        last_t: f64::NEG_INFINITY,
        images,
        observer,
    };
    let mut events = events.into_iter();

    let mut drive = |tracker: &mut Tracker| -> Result<(), PipelineError> {
        let mut chunk = Vec::new();
        loop {
            let n = selector.window_size();
            chunk.clear();
            while chunk.len() < n {
                let Some(ev) = events.next() else { break };
                let ev = ev?;
                match &rect {
                    Some(map) => chunk.extend(map.rectify(&ev)),
                    None => chunk.push(ev),
                }
            }
            if chunk.is_empty() {
                break;
            }
            run.stats.events += chunk.len();
            run.stats.tiny_frames += 1;
            let start = Instant::now();
            let decision = selector.step(&chunk);
            run.timings.l1_per_tiny_frame.add(ms(start));
            match decision {
                SelectorDecision::RejectedNoisy => run.stats.rejected_tiny_frames += 1,
                SelectorDecision::Trigger(w) | SelectorDecision::Forced(w) => run.window(w, &mut selector, tracker),
                _ => {}
            }
            if chunk.len() < n {
                break;
            }
        }
        if let Some(w) = selector.flush() {
            run.window(w, &mut selector, tracker);
        }
        Ok(())
    };

    let slam = Slam::new(slam_cfg, ideal);
    let threaded = match cfg.mode {
        ExecutionMode::Sequential => {
            let mut tracker = Tracker::Inline(slam);
            drive(&mut tracker)?;
            let Tracker::Inline(slam) = tracker else { unreachable!() };
            Err(slam)
        }
        ExecutionMode::Concurrent => Ok(std::thread::scope(|s| -> Result<_, PipelineError> {
            let (tx, rx) = mpsc::sync_channel::<(f64, ImageBuffer)>(2);
            let prior = Arc::new(Mutex::new((None, None)));
            let shared = Arc::clone(&prior);
            let handle = s.spawn(move || {
                let mut slam = slam;
                let mut results = Vec::new();
                let mut timing = TimingStat::default();
                for (t, img) in rx {
                    let start = Instant::now();
                    results.push(slam.process(t, &img));
                    timing.add(ms(start));
                    *shared.lock().expect("prior lock") = (slam.velocity(), slam.scene_depth());
                }
                (slam, results, timing)
            });
            let mut tracker = Tracker::Threaded { tx, prior, handle };
            let outcome = drive(&mut tracker);
            let Tracker::Threaded { tx, handle, .. } = tracker else { unreachable!() };
            drop(tx);
            let (slam, results, timing) = handle.join().expect("tracking thread panicked");
            outcome?;
            Ok((slam, results, timing))
        })?),
    };
    let slam = match threaded {
        Err(slam) => slam,
        Ok((slam, results, timing)) => {
            run.results = results;
            run.timings.l2_per_mci = timing;
            slam
        }
    };

    let mut stats = run.stats;
    for r in &run.results {
        stats.keyframes += usize::from(r.keyframe);
        stats.lost += usize::from(r.status == SlamStatus::Lost);
        stats.initializations += usize::from(r.status == SlamStatus::Initialized);
    }
    info!(
        "{} events, {} tiny frames, {} MCIs ({} forced), {} initializations, {} losses",
        stats.events, stats.tiny_frames, stats.mcis, stats.forced_mcis, stats.initializations, stats.lost
    );
    Ok(PipelineOutput {
        atlas: slam.into_atlas(),
        stats,
        timings: run.timings,
        records: run.records,
    })
}

/// Writes `graph_<k>.txt`, `atlas.json`, `stats.json`, `mcis.csv` and
/// `timing.json` into `dir`. Everything except the timing file is
/// deterministic in sequential mode.
pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<AtlasManifest, IoError> {
    let manifest = io::write_trajectory(&out.atlas.trajectories(), dir)?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| IoError::Io { path, source })
    };
    write("stats.json", serde_json::to_string_pretty(&out.stats).expect("stats serialize"))?;
    write("timing.json", serde_json::to_string_pretty(&out.timings).expect("timings serialize"))?;
    let mut csv = String::from("t_ref,t_start,events,tiny_frames,forced,hypothesis,score,uncompensated_score\n");
    for r in &out.records {
        csv.push_str(&format!(
            "{:.9},{:.9},{},{},{},{:?},{:.9e},{:.9e}\n",
            r.t_ref, r.t_start, r.events, r.tiny_frames, r.forced, r.hypothesis, r.score, r.uncompensated_score
        ));
    }
    write("mcis.csv", csv)?;
    Ok(manifest)
}

/// Reads the camera and events named in `cfg`, runs the pipeline and writes
/// the outputs when an output directory is set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let cam_path = cfg.camera.as_ref().ok_or_else(|| PipelineError::Config("no camera file".into()))?;
    let ev_path = cfg.events.as_ref().ok_or_else(|| PipelineError::Config("no event file".into()))?;
    cfg.validate()?;
    let cam = io::read_camera(cam_path, None)?;
    let events = io::read_events(ev_path, cam.width, cam.height)?;
    let out = run_events(events, &cam, cfg, None)?;
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.clone(),
            source,
        })?;
        write_outputs(&out, dir)?;
    }
    Ok(out)
}
