//! Pyramidal Lucas-Kanade tracking with a forward-backward consistency check.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{ImageBuffer, Pyramid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KltConfig {
    pub levels: usize,
    /// Side of the square integration window (odd).
    pub window: usize,
    pub max_bidirectional_error: f64,
    pub max_iterations: usize,
    pub epsilon: f64,
    /// Minimum eigenvalue of the per-pixel averaged structure tensor.
    pub min_eigenvalue: f64,
}

impl Default for KltConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            window: 23,
            max_bidirectional_error: 1.0,
            max_iterations: 30,
            epsilon: 0.01,
            min_eigenvalue: 1e-2,
        }
    }
}

impl KltConfig {
    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<(), super::VisionError> {
        if self.levels == 0 || self.window % 2 == 0 || self.window < 3 {
            return Err(super::VisionError::InvalidParameter(format!(
                "klt needs levels >= 1 and an odd window >= 3, got {} and {}",
                self.levels, self.window
            )));
        }
        if !(self.max_bidirectional_error > 0.0 && self.epsilon > 0.0) {
            return Err(super::VisionError::InvalidParameter(
                "klt tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Tracked,
    /// The window left the image (either at the start or at the end).
    OutOfBounds,
    /// Not enough texture to solve for the flow.
    LowTexture,
    Diverged,
    /// Backward tracking did not return close enough to the start.
    Inconsistent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackResult {
    pub position: Vector2<f64>,
    pub status: TrackStatus,
}

impl TrackResult {
    pub fn ok(&self) -> bool {
        self.status == TrackStatus::Tracked
    }
}

fn window_inside(img: &ImageBuffer, p: &Vector2<f64>, hw: f64) -> bool {
    p.x - hw >= 0.0
        && p.y - hw >= 0.0
        && p.x + hw <= (img.width() - 1) as f64
        && p.y + hw <= (img.height() - 1) as f64
}

struct Template {
    values: Vec<f32>,
    gx: Vec<f32>,
    gy: Vec<f32>,
    // Inverse of the 2x2 structure tensor.
    inv: [f64; 3],
}

fn template(img: &ImageBuffer, p: &Vector2<f64>, hw: isize, min_eig: f64) -> Option<Template> {
    let n = ((2 * hw + 1) * (2 * hw + 1)) as usize;
    let mut values = Vec::with_capacity(n);
    let mut gx = Vec::with_capacity(n);
    let mut gy = Vec::with_capacity(n);
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for dy in -hw..=hw {
        for dx in -hw..=hw {
            let (x, y) = (p.x + dx as f64, p.y + dy as f64);
            let v = img.sample(x, y);
            let ix = 0.5 * (img.sample(x + 1.0, y) - img.sample(x - 1.0, y));
            let iy = 0.5 * (img.sample(x, y + 1.0) - img.sample(x, y - 1.0));
            values.push(v);
            gx.push(ix);
            gy.push(iy);
            a += (ix * ix) as f64;
            b += (ix * iy) as f64;
            c += (iy * iy) as f64;
        }
    }
    let min_eigen = 0.5 * ((a + c) - ((a - c).powi(2) + 4.0 * b * b).sqrt()) / n as f64;
    let det = a * c - b * b;
    if !(min_eigen >= min_eig) || det <= 0.0 {
        return None;
    }
    // Zero-mean, unit-variance patch so gain and bias changes between frames cancel.
    let (mean, sd) = moments(&values);
    for k in 0..n {
        values[k] = (values[k] - mean) / sd;
        gx[k] /= sd;
        gy[k] /= sd;
    }
    let s2 = (sd * sd) as f64;
    Some(Template {
        values,
        gx,
        gy,
        inv: [s2 * c / det, -s2 * b / det, s2 * a / det],
    })
}

fn moments(v: &[f32]) -> (f32, f32) {
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// Tracks one point between two images of the same level, starting at `guess`.
fn track_level(
    prev: &ImageBuffer,
    next: &ImageBuffer,
    p: &Vector2<f64>,
    guess: Vector2<f64>,
    cfg: &KltConfig,
) -> Result<Vector2<f64>, TrackStatus> {
    let hw = cfg.half_window() as isize;
    let t = template(prev, p, hw, cfg.min_eigenvalue).ok_or(TrackStatus::LowTexture)?;
    let mut q = guess;
    let mut window = Vec::with_capacity(t.values.len());
    for _ in 0..cfg.max_iterations {
        window.clear();
        for dy in -hw..=hw {
            for dx in -hw..=hw {
                window.push(next.sample(q.x + dx as f64, q.y + dy as f64));
            }
        }
        let (mean, sd) = moments(&window);
        let (mut bx, mut by) = (0.0f64, 0.0f64);
        for (k, w) in window.iter().enumerate() {
            let r = t.values[k] - (w - mean) / sd;
            bx += (r * t.gx[k]) as f64;
            by += (r * t.gy[k]) as f64;
        }
        let d = Vector2::new(t.inv[0] * bx + t.inv[1] * by, t.inv[1] * bx + t.inv[2] * by);
        if !(d.x.is_finite() && d.y.is_finite()) {
            return Err(TrackStatus::Diverged);
        }
        q += d;
        if d.norm() < cfg.epsilon {
            break;
        }
        // Far outside the image the clamped border gives no information.
        if q.x < -(2 * hw) as f64
            || q.y < -(2 * hw) as f64
            || q.x > (next.width() as isize + 2 * hw) as f64
            || q.y > (next.height() as isize + 2 * hw) as f64
        {
            return Err(TrackStatus::OutOfBounds);
        }
    }
    Ok(q)
}

fn track_pyramid(
    prev: &Pyramid,
    next: &Pyramid,
    p: &Vector2<f64>,
    guess: &Vector2<f64>,
    cfg: &KltConfig,
) -> Result<Vector2<f64>, TrackStatus> {
    let hw = cfg.half_window() as f64;
    if !window_inside(prev.base(), p, hw) {
        return Err(TrackStatus::OutOfBounds);
    }
    let levels = prev.len().min(next.len()).min(cfg.levels);
    let top = levels - 1;
    let mut q = guess / (1u32 << top) as f64;
    for level in (0..levels).rev() {
        let s = (1u32 << level) as f64;
        let pl = p / s;
        match track_level(prev.level(level), next.level(level), &pl, q, cfg) {
            Ok(r) => q = r,
            // Coarse levels only seed the next one; fall back to the scaled guess.
            Err(TrackStatus::LowTexture) if level > 0 => {}
            Err(e) => return Err(e),
        }
        if level > 0 {
            q *= 2.0;
        }
    }
    if !window_inside(next.base(), &q, hw) {
        return Err(TrackStatus::OutOfBounds);
    }
    Ok(q)
}

/// Tracks `points` from `prev` to `next`, using each point's own position as
/// the initial guess.
pub fn klt_track(prev: &Pyramid, next: &Pyramid, points: &[Vector2<f64>], cfg: &KltConfig) -> Vec<TrackResult> {
    klt_track_with_guesses(prev, next, points, points, cfg)
}

/// Like [`klt_track`] with explicit initial guesses in the `next` image.
pub fn klt_track_with_guesses(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Vector2<f64>],
    guesses: &[Vector2<f64>],
    cfg: &KltConfig,
) -> Vec<TrackResult> {
    assert_eq!(points.len(), guesses.len());
    points
        .iter()
        .zip(guesses)
        .map(|(p, g)| {
            let fwd = match track_pyramid(prev, next, p, g, cfg) {
                Ok(q) => q,
                Err(status) => return TrackResult { position: *g, status },
            };
            let status = match track_pyramid(next, prev, &fwd, p, cfg) {
                Ok(back) if (back - p).norm() <= cfg.max_bidirectional_error => TrackStatus::Tracked,
                Ok(_) => TrackStatus::Inconsistent,
                Err(s) => s,
            };
            TrackResult { position: fwd, status }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::build_pyramid;

    fn texture(x: f64, y: f64) -> f32 {
        (128.0 + 60.0 * (0.31 * x).sin() * (0.23 * y).cos() + 40.0 * (0.17 * x + 0.29 * y).sin()) as f32
    }

    fn shifted(w: usize, h: usize, sx: f64, sy: f64) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| texture(x as f64 - sx, y as f64 - sy))
    }

    fn grid_points() -> Vec<Vector2<f64>> {
        let mut pts = Vec::new();
        for y in (20..80).step_by(15) {
            for x in (20..100).step_by(15) {
                pts.push(Vector2::new(x as f64, y as f64));
            }
        }
        pts
    }

    #[test]
    fn identical_images_give_zero_flow() {
        let cfg = KltConfig::default();
        let img = shifted(120, 100, 0.0, 0.0);
        let pyr = build_pyramid(&img, cfg.levels, cfg.window).unwrap();
        let pts = grid_points();
        for (r, p) in klt_track(&pyr, &pyr, &pts, &cfg).iter().zip(&pts) {
            assert!(r.ok());
            assert!((r.position - p).norm() < 0.01);
        }
    }

    #[test]
    fn recovers_known_shift() {
        let cfg = KltConfig::default();
        let a = build_pyramid(&shifted(120, 100, 0.0, 0.0), cfg.levels, cfg.window).unwrap();
        let b = build_pyramid(&shifted(120, 100, 2.0, 3.0), cfg.levels, cfg.window).unwrap();
        let pts = grid_points();
        let res = klt_track(&a, &b, &pts, &cfg);
        for (r, p) in res.iter().zip(&pts) {
            assert!(r.ok(), "{p:?} -> {r:?}");
            let flow = r.position - p;
            assert!((flow.x - 2.0).abs() < 0.1 && (flow.y - 3.0).abs() < 0.1, "flow {flow:?}");
        }
    }

    #[test]
    fn window_leaving_the_image_fails() {
        let cfg = KltConfig::default();
        let a = build_pyramid(&shifted(120, 100, 0.0, 0.0), cfg.levels, cfg.window).unwrap();
        let b = build_pyramid(&shifted(120, 100, 6.0, 0.0), cfg.levels, cfg.window).unwrap();
        let r = klt_track(&a, &b, &[Vector2::new(104.0, 50.0)], &cfg);
        assert_eq!(r[0].status, TrackStatus::OutOfBounds);
    }

    #[test]
    fn flat_region_is_low_texture() {
        let cfg = KltConfig::default();
        let img = ImageBuffer::from_fn(100, 100, |_, _| 50.0);
        let pyr = build_pyramid(&img, cfg.levels, cfg.window).unwrap();
        let r = klt_track(&pyr, &pyr, &[Vector2::new(50.0, 50.0)], &cfg);
        assert_eq!(r[0].status, TrackStatus::LowTexture);
    }
}
