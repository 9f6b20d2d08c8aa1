use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mcislam::evaluation::{ate_rmse, rpe_bar, stability, RpeComponent, ScaleMode, TrajectorySample, DEFAULT_MAX_DT};
use mcislam::io::{self, write_camera, write_events, write_samples};
use mcislam::pipeline::{run_events, write_outputs, ExecutionMode, MciRecord, PipelineConfig};
use mcislam::simulator::{simulate_events, SceneSpec};
use mcislam::types::CameraModel;

#[derive(Parser)]
#[command(name = "mcislam", version, about = "Event-camera odometry with motion-compensated images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on an event file.
    Run(RunArgs),
    /// Render a synthetic scene into events and ground truth.
    Simulate(SimulateArgs),
    /// Compute trajectory metrics against ground truth as CSV.
    Evaluate(EvaluateArgs),
    /// Dump every MCI candidate of windows ending in a time range.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sequential,
    Concurrent,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    /// Camera file (TOML or a calibration line `fx fy cx cy [k1 k2 p1 p2 k3]`).
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Sensor size for a calibration-line camera file.
    #[arg(long, value_name = "WxH", default_value = "240x180", value_parser = parse_resolution)]
    resolution: (u32, u32),
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set selector.th_fd=4.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write each selected MCI as PGM.
    #[arg(long)]
    debug_images: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, short)]
    output: PathBuf,
    /// TOML scene description; defaults to a textured plane and smooth motion.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 240)]
    width: u32,
    #[arg(long, default_value_t = 180)]
    height: u32,
    #[arg(long, default_value_t = 200.0)]
    focal: f64,
    /// Multiplies the trajectory clock.
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output directory of `run` (with atlas.json) or a single trajectory file.
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    groundtruth: PathBuf,
    #[arg(long, default_value = "sequence")]
    sequence: String,
    #[arg(long = "label", default_value = "default")]
    label: String,
    #[arg(long, default_value_t = DEFAULT_MAX_DT)]
    max_dt: f64,
    /// Append to this CSV instead of printing.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    from: f64,
    #[arg(long, default_value_t = f64::INFINITY)]
    to: f64,
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    Ok((w.parse().map_err(|e| format!("{e}"))?, h.parse().map_err(|e| format!("{e}"))?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// Applies `a.b.c=value` to a TOML table; the value is parsed as TOML and
/// falls back to a string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn load_config(a: &PipelineArgs) -> Result<(PipelineConfig, CameraModel)> {
    let mut table = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in &a.overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: PipelineConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    if let Some(p) = &a.events {
        cfg.events = Some(p.clone());
    }
    if let Some(p) = &a.camera {
        cfg.camera = Some(p.clone());
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            Mode::Sequential => ExecutionMode::Sequential,
            Mode::Concurrent => ExecutionMode::Concurrent,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cam_path = cfg.camera.clone().context("no camera file given (--camera or `camera` in the config)")?;
    if cfg.events.is_none() {
        bail!("no event file given (--events or `events` in the config)");
    }
    let cam = io::read_camera(&cam_path, Some(a.resolution))?;
    // Sensor-dependent window size unless the user set one.
    let user_set_ne = a.overrides.iter().any(|o| o.trim_start().starts_with("selector.n_e"))
        || a.config.as_ref().is_some_and(|p| {
            fs::read_to_string(p)
                .ok()
                .and_then(|t| toml::from_str::<toml::Table>(&t).ok())
                .and_then(|t| t.get("selector").and_then(|s| s.get("n_e")).cloned())
                .is_some()
        });
    if !user_set_ne {
        cfg.selector.n_e = PipelineConfig::for_camera(&cam).selector.n_e;
    }
    cfg.validate()?;
    Ok((cfg, cam))
}

fn run(a: RunArgs) -> Result<()> {
    let (mut cfg, cam) = load_config(&a.pipeline)?;
    if let Some(o) = a.output {
        cfg.output = Some(o);
    }
    cfg.debug_images |= a.debug_images;
    if let Some(dir) = &cfg.output {
        fs::create_dir_all(dir)?;
    }
    let events = io::read_events(cfg.events.as_ref().unwrap(), cam.width, cam.height)?;
    let out = run_events(events, &cam, &cfg, None)?;
    if let Some(dir) = &cfg.output {
        let manifest = write_outputs(&out, dir)?;
        fs::write(dir.join("config.toml"), toml::to_string(&cfg)?)?;
        info!("wrote {} pose graphs to {}", manifest.graphs.len(), dir.display());
    }
    print!("{}", out.timings.table());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec = match &a.scene {
        Some(p) => toml::from_str::<SceneSpec>(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SceneSpec::default(),
    };
    if let Some(s) = a.speed {
        spec.speed = s;
    }
    if let Some(c) = a.contrast {
        spec.contrast = c;
    }
    let cam = CameraModel::pinhole(a.width, a.height, a.focal, a.focal, a.width as f64 / 2.0, a.height as f64 / 2.0);
    let scene = spec.build(cam);
    let sim = simulate_events(&scene, a.duration, a.seed)?;
    fs::create_dir_all(&a.output)?;
    write_events(a.output.join("events.txt"), &sim.events)?;
    write_samples(a.output.join("groundtruth.txt"), &sim.groundtruth)?;
    write_camera(a.output.join("camera.toml"), &cam)?;
    fs::write(a.output.join("scene.toml"), toml::to_string(&spec)?)?;
    info!(
        "{} events and {} ground-truth poses written to {}",
        sim.events.len(),
        sim.groundtruth.len(),
        a.output.display()
    );
    Ok(())
}

fn load_estimate(path: &Path) -> Result<Vec<Vec<TrajectorySample>>> {
    if path.is_dir() {
        Ok(io::read_atlas(path)?)
    } else {
        Ok(vec![io::read_trajectory(path)?])
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let atlas = load_estimate(&a.estimate)?;
    let gt = io::read_groundtruth(&a.groundtruth)?;
    let fmt = |r: Result<f64, _>| r.map_or_else(|_| "nan".to_string(), |v: f64| format!("{v:.9}"));
    let st = stability(&atlas);
    let longest = atlas.iter().max_by_key(|g| g.len());
    let rows = [
        ("graphs", atlas.len().to_string()),
        (
            "rpe_position",
            fmt(rpe_bar(&atlas, &gt, RpeComponent::Position, ScaleMode::PerGraph, a.max_dt)),
        ),
        (
            "rpe_rotation_deg_per_m",
            fmt(rpe_bar(&atlas, &gt, RpeComponent::Rotation, ScaleMode::PerGraph, a.max_dt)),
        ),
        ("stability_time_s", format!("{:.9}", st.time)),
        ("stability_distance_m", format!("{:.9}", st.distance)),
        ("stability", format!("{:.9}", st.product)),
        (
            "ate_rmse_longest_graph",
            longest.map_or("nan".into(), |g| fmt(ate_rmse(g, &gt, a.max_dt))),
        ),
    ];
    let mut text = String::new();
    let write_header = a.csv.as_ref().is_none_or(|p| !p.exists());
    if write_header {
        text.push_str("sequence,config,metric,value\n");
    }
    for (metric, value) in rows {
        text.push_str(&format!("{},{},{metric},{value}\n", a.sequence, a.label));
    }
    match &a.csv {
        Some(p) => fs::OpenOptions::new().create(true).append(true).open(p)?.write_all(text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (cfg, cam) = load_config(&a.pipeline)?;
    fs::create_dir_all(&a.output)?;
    let events = io::read_events(cfg.events.as_ref().unwrap(), cam.width, cam.height)?;
    let mut csv = String::from("window,t_ref,hypothesis,score,selected\n");
    let mut window = 0usize;
    let mut failure: Option<std::io::Error> = None;
    let mut observer = |r: &MciRecord, candidates: &[mcislam::mci::MciCandidate]| {
        if r.t_ref < a.from || r.t_ref > a.to {
            return;
        }
        for c in candidates {
            let name = format!("w{window:05}_{:?}.pgm", c.hypothesis);
            if let Err(e) = c.normalized().write_pgm(a.output.join(&name)) {
                failure.get_or_insert(e);
            }
            csv.push_str(&format!(
                "{window},{:.9},{:?},{:.9e},{}\n",
                r.t_ref,
                c.hypothesis,
                c.score,
                c.hypothesis == r.hypothesis
            ));
        }
        window += 1;
    };
    run_events(events, &cam, &cfg, Some(&mut observer))?;
    if let Some(e) = failure {
        return Err(e).context("writing candidate images");
    }
    fs::write(a.output.join("candidates.csv"), csv)?;
    info!("dumped {window} windows to {}", a.output.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "selector.th_fd=4.5").unwrap();
        apply_override(&mut t, "mode=concurrent").unwrap();
        apply_override(&mut t, "seed=9").unwrap();
        let cfg: PipelineConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.selector.th_fd, 4.5);
        assert_eq!(cfg.mode, ExecutionMode::Concurrent);
        assert_eq!(cfg.seed, 9);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
        assert_eq!(parse_resolution("346x260"), Ok((346, 260)));
        assert!(parse_resolution("346").is_err());
    }
}
