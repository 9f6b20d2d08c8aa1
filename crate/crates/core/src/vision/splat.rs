//! Event histograms: every event deposits a truncated, unit-mass Gaussian
//! at its (possibly warped, sub-pixel) location.

use serde::{Deserialize, Serialize};

use super::ImageBuffer;
use crate::types::Event;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolarityMode {
    /// Each event contributes its polarity sign.
    Signed,
    /// Every event contributes +1.
    Unsigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    pub sigma: f64,
    pub polarity_mode: PolarityMode,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            polarity_mode: PolarityMode::Unsigned,
        }
    }
}

impl SplatConfig {
    /// Kernel support half-width in pixels (3 sigma).
    pub fn truncation(&self) -> f64 {
        3.0 * self.sigma
    }

    #[inline]
    pub fn weight(&self, ev: &Event) -> f32 {
        match self.polarity_mode {
            PolarityMode::Signed => ev.polarity.sign(),
            PolarityMode::Unsigned => 1.0,
        }
    }
}

const MAX_TAPS: usize = 32;

/// 1D kernel taps for a point at `c`: first integer index and normalized weights.
#[inline]
fn taps(c: f64, sigma: f64, radius: f64, out: &mut [f32; MAX_TAPS]) -> (isize, usize) {
    let lo = (c - radius).ceil() as isize;
    let hi = (c + radius).floor() as isize;
    let n = ((hi - lo + 1).max(0) as usize).min(MAX_TAPS);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for (k, o) in out.iter_mut().enumerate().take(n) {
        let d = (lo + k as isize) as f64 - c;
        let w = (-d * d * inv).exp();
        *o = w as f32;
        sum += w;
    }
    if sum > 0.0 {
        let s = (1.0 / sum) as f32;
        for o in out.iter_mut().take(n) {
            *o *= s;
        }
    }
    (lo, n)
}

/// Splats weighted points `(x, y, w)` into a `width x height` image. Each
/// point carries mass `w`; contributions outside the image are clipped.
pub fn splat_points(
    points: impl IntoIterator<Item = (f64, f64, f32)>,
    cfg: &SplatConfig,
    width: usize,
    height: usize,
) -> ImageBuffer {
    let mut img = ImageBuffer::zeros(width, height);
    let radius = cfg.truncation();
    let sigma = cfg.sigma;
    let mut wx = [0f32; MAX_TAPS];
    let mut wy = [0f32; MAX_TAPS];
    let (w_i, h_i) = (width as isize, height as isize);
    let data = img.data_mut();
    for (x, y, w) in points {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        if x < -radius || y < -radius || x > (width as f64) + radius || y > (height as f64) + radius {
            continue;
        }
        let (x0, nx) = taps(x, sigma, radius, &mut wx);
        let (y0, ny) = taps(y, sigma, radius, &mut wy);
        for (j, &ky) in wy.iter().enumerate().take(ny) {
            let py = y0 + j as isize;
            if py < 0 || py >= h_i {
                continue;
            }
            let row = py as usize * width;
            let kyw = ky * w;
            for (i, &kx) in wx.iter().enumerate().take(nx) {
                let px = x0 + i as isize;
                if px < 0 || px >= w_i {
                    continue;
                }
                data[row + px as usize] += kx * kyw;
            }
        }
    }
    img
}

/// Event histogram at the events' own coordinates (no warping).
pub fn splat_events(events: &[Event], cfg: &SplatConfig, width: usize, height: usize) -> ImageBuffer {
    splat_points(
        events.iter().map(|e| (e.x as f64, e.y as f64, cfg.weight(e))),
        cfg,
        width,
        height,
    )
}

/// Affine map to [0, 255] using the min and max over the nonzero support.
/// Pixels outside the support follow the same map and are clamped.
pub fn normalize_min_max(img: &ImageBuffer) -> ImageBuffer {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in img.data() {
        if v != 0.0 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mut out = img.clone();
    if !lo.is_finite() {
        return out;
    }
    if hi - lo <= f32::EPSILON * hi.abs().max(1.0) {
        for v in out.data_mut() {
            *v = if *v != 0.0 { 255.0 } else { 0.0 };
        }
        return out;
    }
    let scale = 255.0 / (hi - lo);
    for v in out.data_mut() {
        *v = ((*v - lo) * scale).clamp(0.0, 255.0);
    }
    out
}
