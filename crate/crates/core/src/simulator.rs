//! Synthetic event camera looking at a textured plane.
//!
//! Each pixel integrates its log intensity and fires an event every time it
//! drifts more than `C` from the level at its last event.

use std::f64::consts::TAU;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::TrajectorySample;
use crate::types::{CameraModel, Event, Polarity, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Intensity map on the world plane `z = depth`, indexed by world (X, Y).
#[derive(Clone, Debug)]
pub struct PlaneTexture {
    width: usize,
    height: usize,
    texel: f64,
    origin: Vector2<f64>,
    data: Vec<f32>,
}

impl PlaneTexture {
    /// Square texture of side `2 * half_extent` metres centred on the optical
    /// axis, evaluated at texel centres.
    pub fn from_fn(half_extent: f64, texel: f64, f: impl Fn(f64, f64) -> f32) -> Self {
        let n = ((2.0 * half_extent / texel).ceil() as usize).max(2);
        let origin = Vector2::new(-half_extent, -half_extent);
        let mut data = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                data.push(f(origin.x + i as f64 * texel, origin.y + j as f64 * texel));
            }
        }
        Self {
            width: n,
            height: n,
            texel,
            origin,
            data,
        }
    }

    pub fn uniform(value: f32) -> Self {
        Self::from_fn(1.0, 1.0, |_, _| value)
    }

    /// Random rectangles over a mid-grey background.
    pub fn procedural(seed: u64, half_extent: f64, texel: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let area = (2.0 * half_extent).powi(2);
        let count = (area * 7.0).round() as usize;
        // (centre, half sizes, angle, intensity)
        let shapes: Vec<(Vector2<f64>, Vector2<f64>, f64, f32)> = (0..count)
            .map(|_| {
                (
                    Vector2::new(
                        rng.random_range(-half_extent..half_extent),
                        rng.random_range(-half_extent..half_extent),
                    ),
                    Vector2::new(rng.random_range(0.05..0.2), rng.random_range(0.05..0.2)),
                    rng.random_range(0.0..std::f64::consts::PI),
                    rng.random_range(0.25f32..1.0),
                )
            })
            .collect();
        let mut tex = Self::from_fn(half_extent, texel, |_, _| 0.5);
        let n = tex.width as isize;
        // Later shapes paint over earlier ones.
        for (c, h, a, i) in &shapes {
            let (s, co) = a.sin_cos();
            let r = h.norm();
            let lo = |v: f64, o: f64| (((v - r - o) / texel).floor() as isize).clamp(0, n - 1);
            let hi = |v: f64, o: f64| (((v + r - o) / texel).ceil() as isize).clamp(0, n - 1);
            for j in lo(c.y, tex.origin.y)..=hi(c.y, tex.origin.y) {
                for k in lo(c.x, tex.origin.x)..=hi(c.x, tex.origin.x) {
                    let d = Vector2::new(tex.origin.x + k as f64 * texel - c.x, tex.origin.y + j as f64 * texel - c.y);
                    let u = co * d.x + s * d.y;
                    let w = -s * d.x + co * d.y;
                    if u.abs() <= h.x && w.abs() <= h.y {
                        tex.data[j as usize * tex.width + k as usize] = *i;
                    }
                }
            }
        }
        tex
    }

    pub fn is_positive(&self) -> bool {
        self.data.iter().all(|&v| v > 0.0 && v.is_finite())
    }

    /// Bilinear sample; outside the texture the border value is repeated.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let u = ((x - self.origin.x) / self.texel).clamp(0.0, (self.width - 1) as f64);
        let v = ((y - self.origin.y) / self.texel).clamp(0.0, (self.height - 1) as f64);
        let (i, j) = ((u as usize).min(self.width - 2), (v as usize).min(self.height - 2));
        let (fx, fy) = ((u - i as f64) as f32, (v - j as f64) as f32);
        let k = j * self.width + i;
        let (a, b) = (self.data[k], self.data[k + 1]);
        let (c, d) = (self.data[k + self.width], self.data[k + self.width + 1]);
        (a + (b - a) * fx) * (1.0 - fy) + (c + (d - c) * fx) * fy
    }
}

/// Periodic camera motion: each axis follows `amp * (sin(2 pi f t + phi) - sin(phi))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothMotion {
    pub center: [f64; 3],
    pub translation_amplitude: [f64; 3],
    /// Radians, about the camera's x, y, z axes.
    pub rotation_amplitude: [f64; 3],
    pub frequency: [f64; 6],
    pub phase: [f64; 6],
}

impl Default for SmoothMotion {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            translation_amplitude: [0.4, 0.3, 0.15],
            rotation_amplitude: [0.08, 0.08, 0.12],
            frequency: [0.21, 0.27, 0.13, 0.17, 0.23, 0.11],
            phase: [0.3, 1.2, 2.0, 0.7, 2.6, 1.6],
        }
    }
}

/// Camera paths; `pose` returns camera-from-world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static {
        center: [f64; 3],
    },
    /// Constant world velocity and constant body angular velocity.
    Linear {
        center: [f64; 3],
        velocity: [f64; 3],
        angular_velocity: [f64; 3],
    },
    Smooth(SmoothMotion),
}

impl Trajectory {
    pub fn pose(&self, t: f64) -> Pose {
        let (c, r) = match self {
            Trajectory::Static { center } => (Vector3::from(*center), UnitQuaternion::identity()),
            Trajectory::Linear {
                center,
                velocity,
                angular_velocity,
            } => (
                Vector3::from(*center) + Vector3::from(*velocity) * t,
                UnitQuaternion::from_scaled_axis(Vector3::from(*angular_velocity) * t),
            ),
            Trajectory::Smooth(m) => {
                let wave = |k: usize, a: f64| a * ((TAU * m.frequency[k] * t + m.phase[k]).sin() - m.phase[k].sin());
                let c = Vector3::new(
                    m.center[0] + wave(0, m.translation_amplitude[0]),
                    m.center[1] + wave(1, m.translation_amplitude[1]),
                    m.center[2] + wave(2, m.translation_amplitude[2]),
                );
                let r = UnitQuaternion::from_euler_angles(
                    wave(3, m.rotation_amplitude[0]),
                    wave(4, m.rotation_amplitude[1]),
                    wave(5, m.rotation_amplitude[2]),
                );
                (c, r)
            }
        };
        // r is world-from-camera rotation, c the camera centre.
        Pose::new(r.inverse(), -(r.inverse() * c))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub texture: PlaneTexture,
    pub plane_depth: f64,
    /// Contrast threshold in log intensity.
    pub contrast: f64,
    pub trajectory: Trajectory,
    pub camera: CameraModel,
    pub sample_rate: f64,
    pub groundtruth_rate: f64,
    /// Spread timestamps uniformly within their sampling interval.
    pub jitter: bool,
    /// Multiplies the trajectory's clock.
    pub speed: f64,
}

impl SyntheticScene {
    pub fn new(texture: PlaneTexture, trajectory: Trajectory, camera: CameraModel) -> Self {
        Self {
            texture,
            plane_depth: 3.0,
            contrast: 0.2,
            trajectory,
            camera,
            sample_rate: 1000.0,
            groundtruth_rate: 200.0,
            jitter: false,
            speed: 1.0,
        }
    }

    /// Camera-from-world pose at time `t`.
    pub fn pose(&self, t: f64) -> Pose {
        self.trajectory.pose(t * self.speed)
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScene(m.into()));
        if !(self.contrast > 0.0) {
            return bad("contrast threshold must be positive");
        }
        if !(self.sample_rate > 0.0 && self.groundtruth_rate > 0.0) {
            return bad("rates must be positive");
        }
        if !(self.plane_depth > 0.0 && self.speed > 0.0) {
            return bad("plane depth and speed must be positive");
        }
        if !self.texture.is_positive() {
            return bad("texture intensities must be positive");
        }
        self.camera
            .validate()
            .map_err(|e| SimError::InvalidScene(e.to_string()))
    }
}

/// Serializable description of a scene with a procedural texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub texture_seed: u64,
    pub texture_half_extent: f64,
    pub texel: f64,
    pub plane_depth: f64,
    pub contrast: f64,
    pub trajectory: Trajectory,
    pub sample_rate: f64,
    pub groundtruth_rate: f64,
    pub jitter: bool,
    pub speed: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            texture_seed: 1,
            texture_half_extent: 6.0,
            texel: 0.005,
            plane_depth: 3.0,
            contrast: 0.2,
            trajectory: Trajectory::Smooth(SmoothMotion::default()),
            sample_rate: 1000.0,
            groundtruth_rate: 200.0,
            jitter: false,
            speed: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn build(&self, camera: CameraModel) -> SyntheticScene {
        SyntheticScene {
            texture: PlaneTexture::procedural(self.texture_seed, self.texture_half_extent, self.texel),
            plane_depth: self.plane_depth,
            contrast: self.contrast,
            trajectory: self.trajectory,
            camera,
            sample_rate: self.sample_rate,
            groundtruth_rate: self.groundtruth_rate,
            jitter: self.jitter,
            speed: self.speed,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Simulation {
    pub events: Vec<Event>,
    /// World-from-camera samples.
    pub groundtruth: Vec<TrajectorySample>,
}

fn quantize(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

struct Renderer<'a> {
    scene: &'a SyntheticScene,
    rays: Vec<Option<Vector3<f64>>>,
}

impl<'a> Renderer<'a> {
    fn new(scene: &'a SyntheticScene) -> Self {
        let cam = &scene.camera;
        let mut rays = Vec::with_capacity(cam.width as usize * cam.height as usize);
        for y in 0..cam.height {
            for x in 0..cam.width {
                rays.push(cam.ray(x as f64, y as f64).ok());
            }
        }
        Self { scene, rays }
    }

    /// Log intensity per pixel at time `t`; NaN where the ray misses the plane.
    fn render(&self, t: f64, out: &mut [f64]) {
        let pose = self.scene.pose(t);
        let r_wc = pose.rotation.inverse().to_rotation_matrix().into_inner();
        let c = -(r_wc * pose.translation);
        let d = self.scene.plane_depth;
        for (o, ray) in out.iter_mut().zip(&self.rays) {
            *o = f64::NAN;
            let Some(ray) = ray else { continue };
            let dir = r_wc * ray;
            if dir.z.abs() < 1e-12 {
                continue;
            }
            let s = (d - c.z) / dir.z;
            if s <= 0.0 {
                continue;
            }
            let v = self.scene.texture.sample(c.x + s * dir.x, c.y + s * dir.y);
            *o = (v as f64).ln();
        }
    }
}

/// Renders the scene at the sample rate over `[0, duration]` and emits
/// events sorted by `(t, y, x)`, plus ground truth at the ground-truth rate.
pub fn simulate_events(scene: &SyntheticScene, duration: f64, seed: u64) -> Result<Simulation, SimError> {
    scene.validate()?;
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(SimError::InvalidScene(format!("duration {duration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let renderer = Renderer::new(scene);
    let w = scene.camera.width as usize;
    let n = renderer.rays.len();
    let c = scene.contrast;
    let dt = 1.0 / scene.sample_rate;
    let steps = (duration * scene.sample_rate).round() as usize;

    let mut prev = vec![0.0; n];
    let mut cur = vec![0.0; n];
    renderer.render(0.0, &mut prev);
    let mut level = prev.clone();
    let mut events = Vec::new();
    for k in 1..=steps {
        let (t0, t1) = ((k - 1) as f64 * dt, (k as f64 * dt).min(duration));
        renderer.render(t1, &mut cur);
        for i in 0..n {
            let (a, b) = (prev[i], cur[i]);
            if !b.is_finite() {
                continue;
            }
            if !a.is_finite() {
                // Pixel just came onto the plane: start integrating from here.
                level[i] = b;
                continue;
            }
            let mut fire = |lvl: f64, pol: Polarity, rng: &mut ChaCha8Rng| {
                let frac = if b != a { ((lvl - a) / (b - a)).clamp(0.0, 1.0) } else { 1.0 };
                let mut t = t0 + frac * (t1 - t0);
                if scene.jitter {
                    t = (t + rng.random_range(0.0..dt)).min(duration);
                }
                events.push(Event::new(
                    quantize(t),
                    (i % w) as f32,
                    (i / w) as f32,
                    pol,
                ));
            };
            while b - level[i] > c {
                level[i] += c;
                fire(level[i], Polarity::Positive, &mut rng);
            }
            while level[i] - b > c {
                level[i] -= c;
                fire(level[i], Polarity::Negative, &mut rng);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x)));

    let gt_steps = (duration * scene.groundtruth_rate).floor() as usize;
    let groundtruth = (0..=gt_steps)
        .map(|k| {
            let t = quantize(k as f64 / scene.groundtruth_rate);
            TrajectorySample {
                t,
                pose: scene.pose(t).inverse(),
            }
        })
        .collect();
    Ok(Simulation { events, groundtruth })
}
