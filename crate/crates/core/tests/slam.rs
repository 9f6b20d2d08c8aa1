//! Tracking and mapping on intensity frames rendered from the simulator plane.

use mcislam::evaluation::{rpe_bar, RpeComponent, ScaleMode, TrajectorySample};
use mcislam::simulator::{SceneSpec, SyntheticScene, Trajectory};
use mcislam::slam::{Slam, SlamConfig, SlamStatus};
use mcislam::types::CameraModel;
use mcislam::vision::ImageBuffer;

fn scene() -> SyntheticScene {
    let spec = SceneSpec {
        trajectory: Trajectory::Linear {
            center: [0.0; 3],
            velocity: [0.6, 0.2, 0.1],
            angular_velocity: [0.02, -0.03, 0.05],
        },
        ..SceneSpec::default()
    };
    spec.build(CameraModel::pinhole(240, 180, 200.0, 200.0, 120.0, 90.0))
}

/// Gradient magnitude of the rendered plane scaled to [0, 255], which looks
/// like an event frame.
fn render(scene: &SyntheticScene, t: f64) -> ImageBuffer {
    let wc = scene.pose(t).inverse();
    let cam = &scene.camera;
    let intensity = ImageBuffer::from_fn(240, 180, |x, y| {
        let d = wc.rotation * cam.ray(x as f64, y as f64).unwrap();
        let lam = (scene.plane_depth - wc.translation.z) / d.z;
        let p = wc.translation + d * lam;
        scene.texture.sample(p.x, p.y).ln()
    });
    let mut g = ImageBuffer::from_fn(240, 180, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = intensity.get_clamped(x + 1, y) - intensity.get_clamped(x - 1, y);
        let gy = intensity.get_clamped(x, y + 1) - intensity.get_clamped(x, y - 1);
        gx.hypot(gy)
    });
    let (_, max) = g.min_max();
    g.data_mut().iter_mut().for_each(|v| *v *= 255.0 / max);
    g
}

const DT: f64 = 1.0 / 30.0;

/// Runs frames until tracking has held for `frames` frames past initialization.
fn tracked_slam(scene: &SyntheticScene, frames: usize) -> (Slam, usize) {
    let mut slam = Slam::new(SlamConfig::default(), scene.camera);
    let mut k = 0;
    let mut since_init = None;
    while since_init.is_none_or(|n| n < frames) {
        assert!(k < 60, "no initialization within 2 s");
        let r = slam.process(k as f64 * DT, &render(scene, k as f64 * DT));
        match r.status {
            SlamStatus::Initialized => since_init = Some(0),
            SlamStatus::Tracking => since_init = since_init.map(|n| n + 1),
            SlamStatus::Lost => panic!("lost at frame {k}"),
            _ => {}
        }
        k += 1;
    }
    (slam, k)
}

fn groundtruth(scene: &SyntheticScene, until: f64) -> Vec<TrajectorySample> {
    (0..=(until / 0.005).ceil() as usize)
        .map(|i| {
            let t = i as f64 * 0.005;
            TrajectorySample::new(t, scene.pose(t).inverse())
        })
        .collect()
}

#[test]
fn initializes_and_follows_translation() {
    let s = scene();
    let (slam, k) = tracked_slam(&s, 20);
    let atlas = slam.atlas().trajectories();
    assert_eq!(atlas.len(), 1);
    assert!(atlas[0].len() >= 20);
    let gt = groundtruth(&s, k as f64 * DT);
    let pos = rpe_bar(&atlas, &gt, RpeComponent::Position, ScaleMode::PerGraph, 1e-3).unwrap();
    assert!(pos < 0.05, "position error {pos}");
    assert!(slam.scene_depth().is_some_and(|z| z > 0.0));
    assert!(slam.velocity().is_some());
}

#[test]
fn blank_frames_are_dropped_then_tracking_resumes() {
    let s = scene();
    let (mut slam, k) = tracked_slam(&s, 5);
    let retries = SlamConfig::default().lost_retries;
    let poses = slam.atlas().active().poses.len();
    for i in 0..retries {
        let r = slam.process((k + i) as f64 * DT, &ImageBuffer::zeros(240, 180));
        assert_ne!(r.status, SlamStatus::Lost);
        assert!(r.pose.is_none());
    }
    assert_eq!(slam.atlas().active().poses.len(), poses);
    let t = (k + retries) as f64 * DT;
    let r = slam.process(t, &render(&s, t));
    assert_eq!(r.status, SlamStatus::Tracking);
    assert_eq!(slam.atlas().graphs.len(), 1);
}

#[test]
fn persistent_loss_starts_a_new_graph() {
    let s = scene();
    let (mut slam, k) = tracked_slam(&s, 5);
    let retries = SlamConfig::default().lost_retries;
    let statuses: Vec<SlamStatus> = (0..=retries)
        .map(|i| slam.process((k + i) as f64 * DT, &ImageBuffer::zeros(240, 180)).status)
        .collect();
    assert_eq!(statuses.last(), Some(&SlamStatus::Lost));
    assert!(!slam.is_tracking());
    assert_eq!(slam.atlas().graphs.len(), 2);
    assert!(slam.atlas().active().is_empty());
}

