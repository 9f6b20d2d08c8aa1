//! Acceptance checks. Each criterion prints one PASS/FAIL/SKIP line; the test
//! fails if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use mcislam::evaluation::{
    associate, binned_relative_errors, rpe_bar, stability, RpeComponent, ScaleMode, TrajectorySample, DEFAULT_MAX_DT,
};
use mcislam::io;
use mcislam::mci::{warp_2d, warp_3d, MciCandidate};
use mcislam::pipeline::{run_events, write_outputs, MciRecord, PipelineConfig, PipelineOutput};
use mcislam::selector::{event_rate, median_feature_displacement, update_window_size};
use mcislam::sfm::{
    ba_cost, local_bundle_adjustment, reprojection_jacobians, triangulate, two_view_init, BaConfig, BaObservation,
    BaProblem, TwoViewConfig,
};
use mcislam::simulator::{simulate_events, SceneSpec, Simulation, SmoothMotion, SyntheticScene, Trajectory};
use mcislam::types::{
    lie_exp, CameraModel, Event, GroupElement, PlanarTwist, Polarity, Pose, SpatialTwist, Twist,
};
use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn camera() -> CameraModel {
    CameraModel::pinhole(240, 180, 200.0, 200.0, 120.0, 90.0)
}

/// Textured plane 3 m ahead, smooth 6-DOF sinusoidal motion.
fn odometry_scene(speed: f64) -> SyntheticScene {
    let spec = SceneSpec {
        contrast: 0.15,
        trajectory: Trajectory::Smooth(SmoothMotion {
            translation_amplitude: [1.2, 0.9, 0.45],
            rotation_amplitude: [0.24, 0.24, 0.36],
            ..SmoothMotion::default()
        }),
        speed,
        ..SceneSpec::default()
    };
    spec.build(camera())
}

fn odometry_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.selector.th_fd = 3.0;
    cfg
}

fn simulate(scene: &SyntheticScene, duration: f64) -> Simulation {
    simulate_events(scene, duration, 1).expect("simulation")
}

fn run(sim: &Simulation, cfg: &PipelineConfig) -> PipelineOutput {
    run_events(sim.events.iter().cloned().map(Ok), &camera(), cfg, None).expect("pipeline")
}

fn within(budget: Duration, elapsed: Duration) -> Result<(), String> {
    if elapsed <= budget {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, budget {budget:?}"))
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b}"))
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let uniform = |n: usize, dt: f64| -> Vec<Event> {
        (0..n)
            .map(|i| Event::new(dt * i as f64 / (n - 1) as f64, 1.0, 1.0, Polarity::Positive))
            .collect()
    };
    let r = event_rate(&uniform(1_000_000, 1.0), 240, 180).ok_or("no rate")?;
    close(r, 1e6 / (240.0 * 180.0), 1e-9, "rate")?;
    close((r * 100.0).round() / 100.0, 23.15, 1e-9, "rounded rate")?;
    let r = event_rate(&uniform(2000, 0.01), 240, 180).ok_or("no rate")?;
    close((r * 100.0).round() / 100.0, 4.63, 1e-9, "small window rate")?;

    let p = |x: f64, y: f64| Vector2::new(x, y);
    let m = median_feature_displacement(&[p(0.0, 0.0), p(10.0, 0.0), p(0.0, 10.0)], &[p(3.0, 4.0), p(10.0, 0.0), p(0.0, 11.0)])
        .map_err(|e| e.to_string())?;
    close(m, 1.0, 1e-9, "median displacement")?;

    ensure(update_window_size(3, 3, 2000) == 2000, || "N_f = N_x changed N_e".into())?;
    ensure(update_window_size(6, 3, 2000) == 4000, || "6,3,2000".into())?;
    ensure(update_window_size(2, 3, 2000) == 1333, || "2,3,2000".into())?;

    let g: Vec<TrajectorySample> = [(0.0, 0.0, 0.0), (1.0, 1.0, 0.0), (2.0, 1.0, 1.0)]
        .iter()
        .map(|&(t, x, y)| TrajectorySample::new(t, Pose::from_translation(Vector3::new(x, y, 0.0))))
        .collect();
    let s = stability(std::slice::from_ref(&g));
    close(s.time, 2.0, 1e-9, "stability time")?;
    close(s.distance, 2.0, 1e-9, "stability distance")?;
    close(s.product, 4.0, 1e-9, "stability product")?;
    let s2 = stability(&[g.clone(), g]);
    close(s2.time, 4.0, 1e-9, "doubled time")?;
    close(s2.distance, 4.0, 1e-9, "doubled distance")?;
    within(Duration::from_secs(1), start.elapsed())?;
    Ok(format!("rate {r:.4} ev/px/s, all examples exact"))
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let cam = camera();
    let unit = CameraModel::pinhole(10, 10, 1.0, 1.0, 0.0, 0.0);
    let px = Vector2::new(13.37, 101.1);
    ensure(warp_2d(&px, &PlanarTwist::zero(mcislam::types::PlanarGroup::Sim2), 0.3, &cam) == px, || {
        "2D identity".into()
    })?;
    ensure(warp_3d(&px, &SpatialTwist::zero(), 2.0, 0.3, &cam) == Some(px), || "3D identity".into())?;
    let q = warp_2d(&Vector2::new(1.0, 0.0), &PlanarTwist::se2(0.0, 0.0, std::f64::consts::FRAC_PI_2), 1.0, &unit);
    ensure((q - Vector2::new(0.0, 1.0)).norm() < 1e-9, || format!("quarter turn gave {q:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = Matrix3::new(200.0, 0.0, 120.0, 0.0, 200.0, 90.0, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().unwrap();
    for _ in 0..100 {
        let tw = PlanarTwist::sim2(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
        );
        let px = Vector2::new(rng.random_range(0.0..240.0), rng.random_range(0.0..180.0));
        let GroupElement::Planar(_, s) = lie_exp(&Twist::Planar(tw), 0.05) else {
            return Err("planar exponential returned a spatial element".into());
        };
        let sr = s.scale * s.rotation.to_rotation_matrix().into_inner();
        let m = Matrix3::new(
            sr[(0, 0)], sr[(0, 1)], s.translation.x,
            sr[(1, 0)], sr[(1, 1)], s.translation.y,
            0.0, 0.0, 1.0,
        );
        let h = k * m * k_inv * Vector3::new(px.x, px.y, 1.0);
        let w = warp_2d(&px, &tw, 0.05, &cam);
        ensure((w - Vector2::new(h.x / h.z, h.y / h.z)).norm() < 1e-9, || "2D warp differs from Exp".into())?;
    }

    let tw = SpatialTwist::new(Vector3::new(0.0, 0.0, -1.0), Vector3::zeros());
    let w = warp_3d(&Vector2::new(0.5, 0.5), &tw, 2.0, 1.0, &unit).ok_or("3D oracle dropped")?;
    ensure((w - Vector2::new(1.0, 1.0)).norm() < 1e-9, || format!("3D oracle gave {w:?}"))?;

    let tw = SpatialTwist::new(Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.2, -0.4, 0.3));
    let hr = k * UnitQuaternion::from_scaled_axis(tw.omega * 0.1).to_rotation_matrix().into_inner() * k_inv;
    for &(x, y) in &[(10.0, 10.0), (120.0, 90.0), (230.0, 170.0)] {
        let q = hr * Vector3::new(x, y, 1.0);
        let w = warp_3d(&Vector2::new(x, y), &tw, 1e6, 0.1, &cam).ok_or("far warp dropped")?;
        ensure((w - Vector2::new(q.x / q.z, q.y / q.z)).norm() < 1e-4, || "far-depth homography".into())?;
    }

    // Time consistency over 1000 random events.
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let om = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let px = Vector2::new(rng.random_range(20.0..220.0), rng.random_range(20.0..160.0));
        let (d1, d2) = (rng.random_range(0.0..0.05), rng.random_range(0.0..0.05));
        let pt = PlanarTwist::sim2(v.x, v.y, om.z, rng.random_range(-0.5..0.5));
        let two = warp_2d(&warp_2d(&px, &pt, d1, &cam), &pt, d2, &cam);
        worst = worst.max((two - warp_2d(&px, &pt, d1 + d2, &cam)).norm());

        let st = SpatialTwist::new(v, om);
        let depth = rng.random_range(1.0..10.0);
        let n = cam.normalize(&px);
        let p1 = Pose::exp(&st, d1).transform_point(&(Vector3::new(n.x, n.y, 1.0) * depth));
        if let (Some(mid), Some(one)) = (warp_3d(&px, &st, depth, d1, &cam), warp_3d(&px, &st, depth, d1 + d2, &cam)) {
            if let Some(two) = warp_3d(&mid, &st, p1.z, d2, &cam) {
                worst = worst.max((two - one).norm());
            }
        }
        checked += 1;
    }
    ensure(worst < 1e-6, || format!("time consistency error {worst:e}"))?;
    within(Duration::from_secs(5), start.elapsed())?;
    Ok(format!("oracles exact, time consistency worst {worst:.1e} px over {checked} events"))
}

/// Median image motion over a pixel grid between `t0` and `t1`, from the
/// ground-truth poses and the plane.
fn true_motion(scene: &SyntheticScene, t0: f64, t1: f64) -> f64 {
    let cam = &scene.camera;
    let (a, b) = (scene.pose(t0), scene.pose(t1));
    let wc = a.inverse();
    let mut d: Vec<f64> = Vec::new();
    for gy in 1..6 {
        for gx in 1..8 {
            let px = Vector2::new(gx as f64 * 30.0, gy as f64 * 30.0);
            let n = cam.normalize(&px);
            let ray = wc.rotation * Vector3::new(n.x, n.y, 1.0);
            let lam = (scene.plane_depth - wc.translation.z) / ray.z;
            let p = wc.translation + ray * lam;
            let c = b.transform_point(&p);
            d.push((cam.denormalize(&Vector2::new(c.x / c.z, c.y / c.z)) - px).norm());
        }
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let scene = odometry_scene(1.0);
    let sim = simulate(&scene, 4.0);
    let mut windows: Vec<(f64, f64, f64)> = Vec::new();
    let mut obs = |r: &MciRecord, _: &[MciCandidate]| {
        windows.push((true_motion(&scene, r.t_start, r.t_ref), r.score, r.uncompensated_score));
    };
    run_events(sim.events.iter().cloned().map(Ok), &camera(), &odometry_config(), Some(&mut obs))
        .map_err(|e| e.to_string())?;
    let moving: Vec<_> = windows.iter().filter(|w| w.0 >= 8.0).collect();
    ensure(!moving.is_empty(), || "no window with 8 px of motion".into())?;
    let sharper = moving.iter().filter(|w| w.1 > w.2).count();
    let frac = sharper as f64 / moving.len() as f64;
    ensure(frac >= 0.95, || format!("selected sharper on {sharper}/{} windows", moving.len()))?;
    let ties = windows.iter().filter(|w| w.0 >= 1.0 && w.1 <= w.2).count();
    ensure(ties == 0 || frac >= 0.95, || format!("{ties} ties above 1 px"))?;
    within(Duration::from_secs(120), start.elapsed())?;
    Ok(format!("selected MCI sharper than histogram on {sharper}/{} windows >= 8 px ({:.1}%)", moving.len(), 100.0 * frac))
}

fn converged_window(out: &PipelineOutput) -> Option<f64> {
    let sizes = &out.stats.window_sizes;
    let mut tail: Vec<f64> = sizes[sizes.len() / 2..].iter().map(|s| s.1 as f64).collect();
    if tail.is_empty() {
        return None;
    }
    tail.sort_by(f64::total_cmp);
    Some(tail[tail.len() / 2])
}

fn ac4() -> Outcome {
    let start = Instant::now();
    let cfg = odometry_config();
    let slow = run(&simulate(&odometry_scene(1.0), 4.0), &cfg);
    let fast = run(&simulate(&odometry_scene(2.0), 2.0), &cfg);
    let (a, b) = (converged_window(&slow).ok_or("no windows")?, converged_window(&fast).ok_or("no windows")?);
    let factor = a / b;
    within(Duration::from_secs(120), start.elapsed())?;
    ensure((1.5..=2.5).contains(&factor), || {
        format!("converged N_e {a:.0} at 1x, {b:.0} at 2x: factor {factor:.2} outside [1.5, 2.5]")
    })?;
    Ok(format!("converged N_e {a:.0} -> {b:.0}, factor {factor:.2}"))
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Pose::new(
        UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(-rot..rot)),
        Vector3::new(rng.random_range(-trans..trans), rng.random_range(-trans..trans), rng.random_range(-trans..trans)),
    )
}

fn ac5() -> Outcome {
    let start = Instant::now();
    let cam = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_rot, mut worst_dir) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        // 50 points in a slab 4..8 m ahead; second view moved sideways.
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.random_range(-2.5..2.5), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0)))
            .collect();
        let rel = Pose::new(
            UnitQuaternion::from_euler_angles(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            Vector3::new(rng.random_range(0.4..0.8), rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1)),
        );
        let matches: Vec<_> = pts
            .iter()
            .filter_map(|p| Some((cam.project(p).ok()?, cam.project(&rel.transform_point(p)).ok()?)))
            .collect();
        let tv = two_view_init(&matches, &cam, false, &TwoViewConfig::default()).map_err(|e| e.reason.to_string())?;
        worst_rot = worst_rot.max(tv.pose.rotation.angle_to(&rel.rotation).to_degrees());
        let cosang = tv.pose.translation.normalize().dot(&rel.translation.normalize()).clamp(-1.0, 1.0);
        worst_dir = worst_dir.max(cosang.acos().to_degrees());
    }
    ensure(worst_rot < 0.5, || format!("two-view rotation error {worst_rot:.3} deg"))?;
    ensure(worst_dir < 1.0, || format!("two-view translation direction error {worst_dir:.3} deg"))?;

    let mut worst_tri = 0.0f64;
    for _ in 0..100 {
        let a = random_pose(&mut rng, 0.1, 0.3);
        let b = random_pose(&mut rng, 0.1, 0.3).compose(&Pose::from_translation(Vector3::new(0.5, 0.0, 0.0)));
        let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
        let (Ok(ua), Ok(ub)) = (cam.project(&a.transform_point(&x)), cam.project(&b.transform_point(&x))) else {
            continue;
        };
        let y = triangulate(&a, &b, &ua, &ub, &cam).map_err(|e| e.to_string())?;
        worst_tri = worst_tri.max((y - x).norm());
    }
    ensure(worst_tri < 1e-9, || format!("triangulation error {worst_tri:e}"))?;

    let mut worst_jac = 0.0f64;
    for _ in 0..50 {
        let pose = random_pose(&mut rng, 0.3, 0.5);
        let x = pose.inverse().transform_point(&Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(2.0..6.0),
        ));
        let (u, jpose, jpoint) = reprojection_jacobians(&pose, &x, &cam).ok_or("point behind camera")?;
        let h = 1e-6;
        for k in 0..6 {
            let mut v = Vector3::zeros();
            let mut w = Vector3::zeros();
            if k < 3 { v[k] = h } else { w[k - 3] = h }
            let moved = Pose::exp(&SpatialTwist::new(v, w), 1.0).compose(&pose);
            let (un, _, _) = reprojection_jacobians(&moved, &x, &cam).ok_or("perturbed point behind camera")?;
            let fd = (un - u) / h;
            let col = jpose.column(k);
            worst_jac = worst_jac.max((fd - col).norm() / col.norm().max(1.0));
        }
        for k in 0..3 {
            let mut xn = x;
            xn[k] += h;
            let (un, _, _) = reprojection_jacobians(&pose, &xn, &cam).ok_or("perturbed point behind camera")?;
            let fd = (un - u) / h;
            let col = jpoint.column(k);
            worst_jac = worst_jac.max((fd - col).norm() / col.norm().max(1.0));
        }
    }
    ensure(worst_jac < 1e-4, || format!("Jacobian relative error {worst_jac:e}"))?;

    // Noisy, perturbed BA problem: accepted steps never increase the cost.
    let truth: Vec<Pose> = (0..4)
        .map(|i| Pose::from_translation(Vector3::new(-0.3 * i as f64, 0.05 * i as f64, 0.0)))
        .collect();
    let pts: Vec<Vector3<f64>> = (0..60)
        .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..7.0)))
        .collect();
    let mut problem = BaProblem {
        poses: truth.iter().enumerate().map(|(i, p)| if i < 2 { *p } else { random_pose(&mut rng, 0.02, 0.05).compose(p) }).collect(),
        fixed: vec![true, true, false, false],
        points: pts.iter().map(|p| p + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))).collect(),
        observations: Vec::new(),
    };
    for (i, pose) in truth.iter().enumerate() {
        for (j, p) in pts.iter().enumerate() {
            if let Ok(u) = cam.project(&pose.transform_point(p)) {
                let noise = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                problem.observations.push(BaObservation { pose: i, point: j, pixel: u + noise, weight: 1.0 });
            }
        }
    }
    let cfg = BaConfig::default();
    let before = ba_cost(&problem, &cam, cfg.huber_delta);
    let report = local_bundle_adjustment(&mut problem, &cam, &cfg).map_err(|e| e.to_string())?;
    let monotone = report.cost_history.windows(2).all(|w| w[1] <= w[0]);
    ensure(monotone && report.final_cost <= before, || format!("cost history {:?}", report.cost_history))?;
    within(Duration::from_secs(30), start.elapsed())?;
    Ok(format!(
        "two-view rot {worst_rot:.3} deg / dir {worst_dir:.3} deg, triangulation {worst_tri:.1e}, Jacobian {worst_jac:.1e}, BA cost {before:.1} -> {:.1}",
        report.final_cost
    ))
}

fn ac6() -> Outcome {
    let start = Instant::now();
    let scene = odometry_scene(1.0);
    let sim = simulate(&scene, 10.0);
    let out = run(&sim, &odometry_config());
    let atlas = out.atlas.trajectories();
    let pos = rpe_bar(&atlas, &sim.groundtruth, RpeComponent::Position, ScaleMode::PerGraph, DEFAULT_MAX_DT)
        .map_err(|e| e.to_string())?;
    let rot = rpe_bar(&atlas, &sim.groundtruth, RpeComponent::Rotation, ScaleMode::PerGraph, DEFAULT_MAX_DT)
        .map_err(|e| e.to_string())?;
    println!("AC10 timing (non-gating), {} MCIs:\n{}", out.stats.mcis, out.timings.table());
    within(Duration::from_secs(300), start.elapsed())?;
    let summary = format!(
        "position {pos:.4} (<= 0.05), rotation {rot:.4} deg/m (<= 0.2), {} graphs, {} poses",
        atlas.len(),
        atlas.iter().map(Vec::len).sum::<usize>()
    );
    ensure(pos <= 0.05 && rot <= 0.2, || summary.clone())?;
    Ok(summary)
}

fn ac7() -> Option<Outcome> {
    let dir = PathBuf::from(std::env::var_os("MCISLAM_SHAPES_6DOF")?);
    if !dir.join("events.txt").exists() {
        return None;
    }
    Some((|| {
        let start = Instant::now();
        let cam = io::read_camera(dir.join("calib.txt"), Some((240, 180))).map_err(|e| e.to_string())?;
        let events = io::read_events(dir.join("events.txt"), cam.width, cam.height)
            .map_err(|e| e.to_string())?
            .take_while(|e| e.as_ref().map_or(true, |e| e.t < 15.0));
        let gt = io::read_groundtruth(dir.join("groundtruth.txt")).map_err(|e| e.to_string())?;
        let mut cfg = PipelineConfig::default();
        cfg.selector.n_e = 2000;
        let out = run_events(events, &cam, &cfg, None).map_err(|e| e.to_string())?;
        ensure(out.stats.initializations >= 1, || "no map initialized".into())?;
        let pos = rpe_bar(&out.atlas.trajectories(), &gt, RpeComponent::Position, ScaleMode::PerGraph, DEFAULT_MAX_DT)
            .map_err(|e| e.to_string())?;
        within(Duration::from_secs(600), start.elapsed())?;
        ensure(pos <= 3.0 * 0.048, || format!("position {pos:.4} > {:.3}", 3.0 * 0.048))?;
        Ok(format!("position {pos:.4} (<= 0.144), {} initializations", out.stats.initializations))
    })())
}

fn wiggly(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrajectorySample> {
    let mut pose = Pose::identity();
    (0..n)
        .map(|i| {
            let step = Pose::new(
                UnitQuaternion::from_euler_angles(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
                Vector3::new(rng.random_range(0.05..0.15), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            );
            pose = pose.compose(&step);
            TrajectorySample::new(0.1 * i as f64, pose)
        })
        .collect()
}

fn ac8() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = wiggly(60, &mut rng);
    let gt_atlas = vec![gt[..30].to_vec(), gt[30..].to_vec()];
    for c in [RpeComponent::Position, RpeComponent::Rotation] {
        let v = rpe_bar(&gt_atlas, &gt, c, ScaleMode::PerGraph, DEFAULT_MAX_DT).map_err(|e| e.to_string())?;
        ensure(v == 0.0, || format!("rpe_bar(gt, gt) = {v} for {c:?}"))?;
    }

    // Noisy estimate, then a per-graph gauge change and scale.
    let est: Vec<Vec<TrajectorySample>> = gt_atlas
        .iter()
        .map(|g| {
            g.iter()
                .map(|s| {
                    let noise = Pose::new(
                        UnitQuaternion::from_euler_angles(rng.random_range(-0.01..0.01), 0.0, rng.random_range(-0.01..0.01)),
                        Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 0.0),
                    );
                    TrajectorySample::new(s.t, s.pose.compose(&noise))
                })
                .collect()
        })
        .collect();
    let moved: Vec<Vec<TrajectorySample>> = est
        .iter()
        .map(|g| {
            let gauge = random_pose(&mut rng, 1.0, 5.0);
            let scale = rng.random_range(0.2..5.0);
            g.iter()
                .map(|s| {
                    let mut p = gauge.compose(&s.pose);
                    p.translation *= scale;
                    TrajectorySample::new(s.t, p)
                })
                .collect()
        })
        .collect();
    for c in [RpeComponent::Position, RpeComponent::Rotation] {
        let a = rpe_bar(&est, &gt, c, ScaleMode::PerGraph, DEFAULT_MAX_DT).map_err(|e| e.to_string())?;
        let b = rpe_bar(&moved, &gt, c, ScaleMode::PerGraph, DEFAULT_MAX_DT).map_err(|e| e.to_string())?;
        close(a, b, 1e-9 * a.max(1.0), &format!("gauge/scale invariance {c:?}"))?;
    }

    let (s1, s2) = (stability(&est[..1]), stability(&est[1..]));
    let both = stability(&est);
    close(both.time, s1.time + s2.time, 1e-9, "stability time additivity")?;
    close(both.distance, s1.distance + s2.distance, 1e-9, "stability distance additivity")?;
    let gauge = random_pose(&mut rng, 1.0, 3.0);
    let s_moved = stability(&[est[0].iter().map(|s| TrajectorySample::new(s.t, gauge.compose(&s.pose))).collect()]);
    close(s_moved.distance, s1.distance, 1e-9, "stability gauge invariance")?;

    // Path length of the first graph is about 3 m: 100 m is unreachable.
    let bins = binned_relative_errors(&gt_atlas[0], &gt, &[0.5, 1.0, 100.0], 100, DEFAULT_MAX_DT).map_err(|e| e.to_string())?;
    ensure(bins[0].is_some() && bins[1].is_some() && bins[2].is_none(), || format!("bins {bins:?}"))?;
    ensure(!associate(&gt_atlas[0], &gt, DEFAULT_MAX_DT).is_empty(), || "association failed".into())?;
    within(Duration::from_secs(10), start.elapsed())?;
    Ok("zero self-error, gauge and scale invariant, stability additive, unreachable bin empty".into())
}

fn ac9() -> Outcome {
    let start = Instant::now();
    let sim = simulate(&odometry_scene(1.0), 3.0);
    let cfg = odometry_config();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        write_outputs(&run(&sim, &cfg), d.path()).map_err(|e| e.to_string())?;
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n != "timing.json")
        .collect();
    names.sort();
    ensure(names.iter().any(|n| n.starts_with("graph_")), || format!("no trajectory written: {names:?}"))?;
    for n in &names {
        let a = std::fs::read(dirs[0].path().join(n)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(n)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{n} differs between runs"))?;
    }
    Ok(format!("{} output files byte-identical ({:.1?} for both runs)", names.len(), start.elapsed()))
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut report = |id: &str, what: &str, r: Option<Outcome>| {
        match r {
            Some(Ok(detail)) => println!("{id} PASS {what}: {detail}"),
            Some(Err(detail)) => {
                println!("{id} FAIL {what}: {detail}");
                failed.push(id.to_string());
            }
            None => println!("{id} SKIP {what}: set MCISLAM_SHAPES_6DOF to the dataset directory"),
        }
    };
    report("AC1", "unit formulas", Some(ac1()));
    report("AC2", "warp correctness", Some(ac2()));
    report("AC3", "MCI contrast", Some(ac3()));
    report("AC4", "adaptive window", Some(ac4()));
    report("AC5", "geometry", Some(ac5()));
    report("AC6", "synthetic odometry", Some(ac6()));
    report("AC7", "real-data smoke", ac7());
    report("AC8", "metric self-consistency", Some(ac8()));
    report("AC9", "determinism", Some(ac9()));
    println!("AC10 PASS timing table reported (non-gating)");
    assert!(failed.is_empty(), "failed: {failed:?}");
}
