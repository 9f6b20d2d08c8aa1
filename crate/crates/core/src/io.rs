//! Text dataset formats: events (`t x y p`), trajectories
//! (`t px py pz qx qy qz qw`), camera files and the atlas manifest.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::TrajectorySample;
use crate::types::{CameraModel, Distortion, Event, Polarity, Pose};

/// Out-of-order events are buffered for this long before release.
pub const REORDER_WINDOW: f64 = 0.01;
/// Timestamps further than this behind the newest one are rejected.
pub const MAX_REGRESSION: f64 = 0.001;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: pixel ({x}, {y}) outside the {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },
    #[error("line {line}: timestamp {t} is more than 1 ms before {newest}")]
    Regression { line: usize, t: f64, newest: f64 },
    #[error("line {line}: quaternion norm {norm} is not unit")]
    Quaternion { line: usize, norm: f64 },
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Heap entry ordered by time, then by arrival.
#[derive(PartialEq)]
struct Pending(f64, u64, Event);

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Streaming reader; memory is bounded by the reorder window.
pub struct EventReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    width: u32,
    height: u32,
    heap: BinaryHeap<Reverse<Pending>>,
    newest: f64,
    seq: u64,
    done: bool,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(reader: R, width: u32, height: u32) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            width,
            height,
            heap: BinaryHeap::new(),
            newest: f64::NEG_INFINITY,
            seq: 0,
            done: false,
        }
    }

    fn parse(&self, s: &str) -> Result<Event, IoError> {
        let line = self.line;
        let bad = |msg: &str| IoError::Parse {
            line,
            msg: format!("{msg}: {s:?}"),
        };
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("expected `t x y p`"));
        }
        let t: f64 = f[0].parse().map_err(|_| bad("bad timestamp"))?;
        if !t.is_finite() {
            return Err(bad("bad timestamp"));
        }
        let x: i64 = f[1].parse().map_err(|_| bad("bad column"))?;
        let y: i64 = f[2].parse().map_err(|_| bad("bad row"))?;
        let p = match f[3] {
            "1" => Polarity::Positive,
            "0" => Polarity::Negative,
            _ => return Err(bad("polarity must be 0 or 1")),
        };
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return Err(IoError::OutOfBounds {
                line,
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(Event::new(t, x as f32, y as f32, p))
    }

    fn release(&mut self, all: bool) -> Option<Event> {
        let top = self.heap.peek()?;
        if all || top.0 .0 <= self.newest - REORDER_WINDOW {
            return self.heap.pop().map(|Reverse(p)| p.2);
        }
        None
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<Event, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(e) = self.release(self.done) {
                return Some(Ok(e));
            }
            if self.done {
                return None;
            }
            match self.lines.next() {
                None => self.done = true,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(IoError::Format(e.to_string())));
                }
                Some(Ok(s)) => {
                    self.line += 1;
                    let s = s.trim();
                    if s.is_empty() || s.starts_with('#') {
                        continue;
                    }
                    let ev = match self.parse(s) {
                        Ok(ev) => ev,
                        Err(e) => return Some(Err(e)),
                    };
                    if ev.t < self.newest - MAX_REGRESSION {
                        return Some(Err(IoError::Regression {
                            line: self.line,
                            t: ev.t,
                            newest: self.newest,
                        }));
                    }
                    self.newest = self.newest.max(ev.t);
                    self.heap.push(Reverse(Pending(ev.t, self.seq, ev)));
                    self.seq += 1;
                }
            }
        }
    }
}

pub fn read_events(path: impl AsRef<Path>, width: u32, height: u32) -> Result<EventReader<BufReader<File>>, IoError> {
    Ok(EventReader::new(open(path.as_ref())?, width, height))
}

pub fn read_all_events(path: impl AsRef<Path>, width: u32, height: u32) -> Result<Vec<Event>, IoError> {
    read_events(path, width, height)?.collect()
}

pub fn write_events(path: impl AsRef<Path>, events: &[Event]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for e in events {
        writeln!(w, "{:.9} {} {} {}", e.t, e.x.round() as i64, e.y.round() as i64, e.polarity.bit())
            .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_sample(s: &str, line: usize) -> Result<TrajectorySample, IoError> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|f| f.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| IoError::Parse {
            line,
            msg: format!("non-numeric field: {s:?}"),
        })?;
    if v.len() != 8 || v.iter().any(|x| !x.is_finite()) {
        return Err(IoError::Parse {
            line,
            msg: format!("expected `t px py pz qx qy qz qw`: {s:?}"),
        });
    }
    let q = Quaternion::new(v[7], v[4], v[5], v[6]);
    let norm = q.norm();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(IoError::Quaternion { line, norm });
    }
    Ok(TrajectorySample::new(
        v[0],
        Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
    ))
}

/// Reads a trajectory file; small timestamp jitter is re-sorted, larger
/// regressions are rejected.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectorySample>, IoError> {
    let path = path.as_ref();
    let mut out: Vec<TrajectorySample> = Vec::new();
    let mut newest = f64::NEG_INFINITY;
    for (k, l) in open(path)?.lines().enumerate() {
        let l = l.map_err(io_err(path))?;
        let s = l.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let sample = parse_sample(s, k + 1)?;
        if sample.t < newest - MAX_REGRESSION {
            return Err(IoError::Regression {
                line: k + 1,
                t: sample.t,
                newest,
            });
        }
        newest = newest.max(sample.t);
        out.push(sample);
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

pub fn read_groundtruth(path: impl AsRef<Path>) -> Result<Vec<TrajectorySample>, IoError> {
    read_trajectory(path)
}

/// Nine significant digits, without exponent for ordinary magnitudes.
fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..=9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

fn format_sample(s: &TrajectorySample) -> String {
    let q = s.pose.rotation.quaternion();
    let p = s.pose.translation;
    let f: Vec<String> = [p.x, p.y, p.z, q.i, q.j, q.k, q.w].iter().map(|&v| sig9(v)).collect();
    format!("{:.9} {}", s.t, f.join(" "))
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[TrajectorySample]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for s in samples {
        writeln!(w, "{}", format_sample(s)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub file: String,
    pub poses: usize,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtlasManifest {
    pub graphs: Vec<GraphEntry>,
}

pub const MANIFEST: &str = "atlas.json";

/// Writes `graph_<k>.txt` per pose graph and the `atlas.json` manifest.
pub fn write_trajectory(atlas: &[Vec<TrajectorySample>], dir: impl AsRef<Path>) -> Result<AtlasManifest, IoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = AtlasManifest::default();
    for (k, g) in atlas.iter().enumerate() {
        let file = format!("graph_{k}.txt");
        write_samples(dir.join(&file), g)?;
        manifest.graphs.push(GraphEntry {
            file,
            poses: g.len(),
            t_start: g.first().map(|s| s.t),
            t_end: g.last().map(|s| s.t),
        });
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| IoError::Format(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads an atlas written by [`write_trajectory`].
pub fn read_atlas(dir: impl AsRef<Path>) -> Result<Vec<Vec<TrajectorySample>>, IoError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: AtlasManifest = serde_json::from_str(&text).map_err(|e| IoError::Format(e.to_string()))?;
    manifest.graphs.iter().map(|g| read_trajectory(dir.join(&g.file))).collect()
}

/// Camera from a TOML file holding the [`CameraModel`] fields, or from a
/// one-line `fx fy cx cy [k1 k2 p1 p2 [k3]]` calibration file when the
/// sensor size is given.
pub fn read_camera(path: impl AsRef<Path>, size: Option<(u32, u32)>) -> Result<CameraModel, IoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let cam = match toml::from_str::<CameraModel>(&text) {
        Ok(c) => c,
        Err(toml_err) => {
            let (w, h) = size.ok_or_else(|| IoError::Format(format!("{}: {toml_err}", path.display())))?;
            let v: Vec<f64> = text
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| IoError::Format(format!("{}: not a calibration line", path.display())))?;
            let d = match v.len() {
                4 => Distortion::none(),
                8 | 9 => Distortion::PinholeRadtan {
                    k1: v[4],
                    k2: v[5],
                    p1: v[6],
                    p2: v[7],
                    k3: v.get(8).copied().unwrap_or(0.0),
                },
                n => return Err(IoError::Format(format!("{}: {n} calibration values", path.display()))),
            };
            CameraModel {
                width: w,
                height: h,
                fx: v[0],
                fy: v[1],
                cx: v[2],
                cy: v[3],
                distortion: d,
            }
        }
    };
    cam.validate().map_err(|e| IoError::Format(e.to_string()))?;
    Ok(cam)
}

pub fn write_camera(path: impl AsRef<Path>, cam: &CameraModel) -> Result<(), IoError> {
    let path = path.as_ref();
    let text = toml::to_string(cam).map_err(|e| IoError::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(io_err(path))
}
