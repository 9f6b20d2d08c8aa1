//! Camera models: pinhole with radial-tangential distortion and
//! Kannala-Brandt (equidistant fisheye), plus a per-pixel rectification table
//! for raw event coordinates.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::Event;

const MAX_UNDISTORT_ITERATIONS: usize = 10;
const UNDISTORT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("point at the projection center")]
    ZeroPoint,
    #[error("non-positive depth {0}")]
    InvalidDepth(f64),
    #[error("distortion inversion did not converge at pixel ({x}, {y})")]
    NonConvergent { x: f64, y: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Lens distortion coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Distortion {
    PinholeRadtan {
        k1: f64,
        k2: f64,
        p1: f64,
        p2: f64,
        #[serde(default)]
        k3: f64,
    },
    KannalaBrandt { k1: f64, k2: f64, k3: f64, k4: f64 },
}

impl Distortion {
    pub fn none() -> Self {
        Distortion::PinholeRadtan {
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            k3: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Distortion::PinholeRadtan { k1, k2, p1, p2, k3 } => {
                k1 == 0.0 && k2 == 0.0 && p1 == 0.0 && p2 == 0.0 && k3 == 0.0
            }
            Distortion::KannalaBrandt { .. } => false,
        }
    }
}

/// Intrinsics plus distortion for a `width x height` sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: Distortion,
}

impl CameraModel {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: Distortion,
    ) -> Result<Self, CameraError> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            distortion,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Ideal pinhole camera without distortion. Not validated, so that the
    /// unit-focal test cameras with the principal point at the origin work.
    pub fn pinhole(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            distortion: Distortion::none(),
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics("zero image size".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Same intrinsics, no distortion: the camera that rectified event
    /// coordinates live in.
    pub fn ideal(&self) -> CameraModel {
        CameraModel {
            distortion: Distortion::none(),
            ..*self
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    #[inline]
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Pixel to normalized image plane, ignoring distortion.
    #[inline]
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    /// Normalized image plane to pixel, ignoring distortion.
    #[inline]
    pub fn denormalize(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        match self.distortion {
            Distortion::PinholeRadtan { .. } => {
                if p.z <= 0.0 {
                    return Err(CameraError::BehindCamera { z: p.z });
                }
                let n = Vector2::new(p.x / p.z, p.y / p.z);
                Ok(self.denormalize(&self.distort_radtan(&n)))
            }
            Distortion::KannalaBrandt { k1, k2, k3, k4 } => {
                let norm = p.norm();
                if norm == 0.0 {
                    return Err(CameraError::ZeroPoint);
                }
                let r = (p.x * p.x + p.y * p.y).sqrt();
                if r < 1e-15 * norm {
                    return Ok(Vector2::new(self.cx, self.cy));
                }
                let theta = r.atan2(p.z);
                let d = kb_theta_d(theta, k1, k2, k3, k4);
                Ok(Vector2::new(
                    self.fx * d * p.x / r + self.cx,
                    self.fy * d * p.y / r + self.cy,
                ))
            }
        }
    }

    /// Back-projects a pixel to the camera-frame point at z-depth `depth`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Result<Vector3<f64>, CameraError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(CameraError::InvalidDepth(depth));
        }
        let ray = self.ray(x, y)?;
        Ok(ray * (depth / ray.z))
    }

    /// Viewing ray through a pixel, scaled to `z = 1`.
    pub fn ray(&self, x: f64, y: f64) -> Result<Vector3<f64>, CameraError> {
        let m = self.normalize(&Vector2::new(x, y));
        match self.distortion {
            Distortion::PinholeRadtan { .. } => {
                let n = self.undistort_radtan(&m).ok_or(CameraError::NonConvergent { x, y })?;
                Ok(Vector3::new(n.x, n.y, 1.0))
            }
            Distortion::KannalaBrandt { k1, k2, k3, k4 } => {
                let theta_d = m.norm();
                if theta_d < 1e-15 {
                    return Ok(Vector3::new(0.0, 0.0, 1.0));
                }
                let theta = kb_invert(theta_d, k1, k2, k3, k4)
                    .ok_or(CameraError::NonConvergent { x, y })?;
                let c = theta.cos();
                if c <= 1e-12 {
                    // Rays at or beyond 90 degrees have no positive z-depth.
                    return Err(CameraError::BehindCamera { z: c });
                }
                let s = theta.sin() / theta_d;
                Ok(Vector3::new(m.x * s / c, m.y * s / c, 1.0))
            }
        }
    }

    /// Undistorted pixel position in the ideal (distortion-free) camera.
    pub fn undistort_pixel(&self, x: f64, y: f64) -> Result<Vector2<f64>, CameraError> {
        let r = self.ray(x, y)?;
        Ok(self.denormalize(&Vector2::new(r.x, r.y)))
    }

    fn distort_radtan(&self, n: &Vector2<f64>) -> Vector2<f64> {
        let Distortion::PinholeRadtan { k1, k2, p1, p2, k3 } = self.distortion else {
            unreachable!("radtan distortion on a non-radtan camera")
        };
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        Vector2::new(
            radial * x + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            radial * y + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    fn distort_radtan_jacobian(&self, n: &Vector2<f64>) -> Matrix2<f64> {
        let Distortion::PinholeRadtan { k1, k2, p1, p2, k3 } = self.distortion else {
            unreachable!("radtan distortion on a non-radtan camera")
        };
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        // d(radial)/d(r2)
        let dr = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2);
        let dxdx = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x;
        let dxdy = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y;
        let dydx = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y;
        let dydy = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x;
        Matrix2::new(dxdx, dxdy, dydx, dydy)
    }

    /// Newton inversion of the radial-tangential model.
    fn undistort_radtan(&self, m: &Vector2<f64>) -> Option<Vector2<f64>> {
        if self.distortion.is_zero() {
            return Some(*m);
        }
        let mut n = *m;
        for _ in 0..MAX_UNDISTORT_ITERATIONS {
            let r = self.distort_radtan(&n) - m;
            let step = self.distort_radtan_jacobian(&n).try_inverse()? * r;
            n -= step;
            if !n.x.is_finite() || !n.y.is_finite() {
                return None;
            }
            if step.norm() < UNDISTORT_TOLERANCE {
                // One more step costs nothing and lands at machine precision.
                let r = self.distort_radtan(&n) - m;
                n -= self.distort_radtan_jacobian(&n).try_inverse()? * r;
                return Some(n);
            }
        }
        None
    }
}

#[inline]
fn kb_theta_d(theta: f64, k1: f64, k2: f64, k3: f64, k4: f64) -> f64 {
    let t2 = theta * theta;
    theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
}

fn kb_invert(theta_d: f64, k1: f64, k2: f64, k3: f64, k4: f64) -> Option<f64> {
    let mut theta = theta_d;
    for _ in 0..MAX_UNDISTORT_ITERATIONS {
        let t2 = theta * theta;
        let f = kb_theta_d(theta, k1, k2, k3, k4) - theta_d;
        let df = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
        if df.abs() < 1e-12 {
            return None;
        }
        let step = f / df;
        theta -= step;
        if !theta.is_finite() {
            return None;
        }
        if step.abs() < UNDISTORT_TOLERANCE {
            let t2 = theta * theta;
            let f = kb_theta_d(theta, k1, k2, k3, k4) - theta_d;
            let df = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
            return Some(theta - f / df);
        }
    }
    None
}

/// Precomputed undistorted position for every sensor pixel.
#[derive(Clone, Debug)]
pub struct RectificationMap {
    width: u32,
    height: u32,
    table: Vec<Option<[f32; 2]>>,
}

impl RectificationMap {
    pub fn new(cam: &CameraModel) -> Self {
        let mut table = Vec::with_capacity((cam.width * cam.height) as usize);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let entry = cam
                    .undistort_pixel(x as f64, y as f64)
                    .ok()
                    .filter(|p| cam.in_bounds(p.x, p.y))
                    .map(|p| [p.x as f32, p.y as f32]);
                table.push(entry);
            }
        }
        Self {
            width: cam.width,
            height: cam.height,
            table,
        }
    }

    /// Undistorted coordinates for an integer sensor pixel, `None` when the
    /// pixel maps outside the image.
    #[inline]
    pub fn lookup(&self, x: u32, y: u32) -> Option<[f32; 2]> {
        if x >= self.width || y >= self.height {
            return None;
        }
        self.table[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn rectify(&self, ev: &Event) -> Option<Event> {
        let (x, y) = (ev.x.round(), ev.y.round());
        if x < 0.0 || y < 0.0 {
            return None;
        }
        self.lookup(x as u32, y as u32).map(|[rx, ry]| Event {
            x: rx,
            y: ry,
            ..*ev
        })
    }
}

/// Replaces raw integer pixel coordinates by undistorted ones, dropping
/// events that leave the image. Order and timestamps are preserved.
pub fn rectify_events(map: &RectificationMap, raw: &[Event]) -> Vec<Event> {
    raw.iter().filter_map(|e| map.rectify(e)).collect()
}
