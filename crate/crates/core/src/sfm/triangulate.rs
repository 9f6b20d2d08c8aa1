use nalgebra::{Matrix4, Vector2, Vector3};

use super::{project_pinhole, SfmError};
use crate::types::{CameraModel, Pose};

/// Rays closer than this are treated as parallel.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.1;
/// Maximum reprojection error accepted in either view.
pub const MAX_REPROJECTION_PX: f64 = 2.0;

/// Linear (DLT) triangulation from normalized image coordinates. No gating.
pub fn triangulate_normalized(
    pose_a: &Pose,
    pose_b: &Pose,
    na: &Vector2<f64>,
    nb: &Vector2<f64>,
) -> Option<Vector3<f64>> {
    let pa = pose_a.to_matrix();
    let pb = pose_b.to_matrix();
    let mut a = Matrix4::zeros();
    let rows = [
        pa.row(2) * na.x - pa.row(0),
        pa.row(2) * na.y - pa.row(1),
        pb.row(2) * nb.x - pb.row(0),
        pb.row(2) * nb.y - pb.row(1),
    ];
    for (i, r) in rows.iter().enumerate() {
        let n = r.norm();
        if n == 0.0 {
            return None;
        }
        a.set_row(i, &(r / n));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = v_t.row(imin);
    if h[3].abs() < 1e-14 {
        return None;
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    x.iter().all(|c| c.is_finite()).then_some(x)
}

/// Angle in degrees between the rays from two camera centers to `x`.
pub fn parallax_deg(center_a: &Vector3<f64>, center_b: &Vector3<f64>, x: &Vector3<f64>) -> f64 {
    let ra = x - center_a;
    let rb = x - center_b;
    let c = ra.dot(&rb) / (ra.norm() * rb.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

fn ray_angle_deg(pose_a: &Pose, pose_b: &Pose, na: &Vector2<f64>, nb: &Vector2<f64>) -> f64 {
    // Rays expressed in world coordinates.
    let ra = pose_a.rotation.inverse() * Vector3::new(na.x, na.y, 1.0);
    let rb = pose_b.rotation.inverse() * Vector3::new(nb.x, nb.y, 1.0);
    let c = ra.dot(&rb) / (ra.norm() * rb.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Triangulates a world point from two camera-from-world poses and pixel
/// observations. The result has positive depth and reprojects within
/// [`MAX_REPROJECTION_PX`] in both views.
pub fn triangulate(
    pose_a: &Pose,
    pose_b: &Pose,
    pixel_a: &Vector2<f64>,
    pixel_b: &Vector2<f64>,
    cam: &CameraModel,
) -> Result<Vector3<f64>, SfmError> {
    let na = cam.normalize(pixel_a);
    let nb = cam.normalize(pixel_b);
    let angle = ray_angle_deg(pose_a, pose_b, &na, &nb);
    let center_gap = (pose_a.inverse().translation - pose_b.inverse().translation).norm();
    if angle < MIN_RAY_ANGLE_DEG || center_gap < 1e-12 {
        return Err(SfmError::ParallelRays { angle_deg: angle });
    }
    let x = triangulate_normalized(pose_a, pose_b, &na, &nb)
        .ok_or(SfmError::ParallelRays { angle_deg: angle })?;
    let (ca, cb) = (pose_a.transform_point(&x), pose_b.transform_point(&x));
    if ca.z <= 0.0 || cb.z <= 0.0 {
        return Err(SfmError::NegativeDepth);
    }
    let ea = (project_pinhole(cam, &ca).ok_or(SfmError::NegativeDepth)? - pixel_a).norm();
    let eb = (project_pinhole(cam, &cb).ok_or(SfmError::NegativeDepth)? - pixel_b).norm();
    let e = ea.max(eb);
    if e > MAX_REPROJECTION_PX {
        return Err(SfmError::ReprojectionGate { error: e });
    }
    Ok(x)
}
