//! Event warps under constant-speed motion models.
//!
//! Both warps move an event observed `dt` seconds before the reference time
//! forward to the reference frame.

use nalgebra::{Vector2, Vector3};

use crate::sfm::project_pinhole;
use crate::types::{CameraModel, PlanarGroup, PlanarTwist, Pose, Similarity2, SpatialTwist};

fn planar_is_zero(t: &PlanarTwist) -> bool {
    t.v.x == 0.0 && t.v.y == 0.0 && t.omega == 0.0 && (t.group == PlanarGroup::Se2 || t.log_scale == 0.0)
}

/// Warps pixel `px` with the planar model `Exp(twist * dt)` applied in
/// normalized image coordinates.
pub fn warp_2d(px: &Vector2<f64>, twist: &PlanarTwist, dt: f64, cam: &CameraModel) -> Vector2<f64> {
    if dt == 0.0 || planar_is_zero(twist) {
        return *px;
    }
    let s = Similarity2::exp(twist, dt);
    warp_2d_with(px, &s, cam)
}

/// Same as [`warp_2d`] with a precomputed transform.
#[inline]
pub fn warp_2d_with(px: &Vector2<f64>, s: &Similarity2, cam: &CameraModel) -> Vector2<f64> {
    cam.denormalize(&s.transform_point(&cam.normalize(px)))
}

/// Warps pixel `px`, back-projected at z-depth `depth`, by `Exp(twist * dt)`
/// and re-projects it. `None` when the moved point is behind the camera.
pub fn warp_3d(
    px: &Vector2<f64>,
    twist: &SpatialTwist,
    depth: f64,
    dt: f64,
    cam: &CameraModel,
) -> Option<Vector2<f64>> {
    if dt == 0.0 || (twist.v == Vector3::zeros() && twist.omega == Vector3::zeros()) {
        return Some(*px);
    }
    warp_3d_with(px, &Pose::exp(twist, dt), depth, cam)
}

#[inline]
pub fn warp_3d_with(px: &Vector2<f64>, t: &Pose, depth: f64, cam: &CameraModel) -> Option<Vector2<f64>> {
    let n = cam.normalize(px);
    let p = Vector3::new(n.x * depth, n.y * depth, depth);
    project_pinhole(cam, &t.transform_point(&p))
}
