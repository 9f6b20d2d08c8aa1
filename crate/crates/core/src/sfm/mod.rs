//! Multi-view geometry on rectified (ideal pinhole) pixel coordinates.
//!
//! Poses are camera-from-world throughout: `p_cam = T * p_world`.

pub mod ba;
pub mod pose_opt;
pub mod triangulate;
pub mod two_view;

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::types::lie::hat;
use crate::types::{CameraModel, Pose};

pub use ba::{
    ba_cost, local_bundle_adjustment, BaConfig, BaObservation, BaProblem, BaReport,
};
pub use pose_opt::{optimize_pose, PoseObservation, PoseOptConfig, PoseOptimization};
pub use triangulate::{parallax_deg, triangulate, triangulate_normalized};
pub use two_view::{
    two_view_init, TwoViewConfig, TwoViewModel, TwoViewRejection, TwoViewResult,
};

/// Chi-square gate at 95% for two degrees of freedom.
pub const CHI2_2DOF: f64 = 5.991;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfmError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("viewing rays are parallel (angle {angle_deg} deg)")]
    ParallelRays { angle_deg: f64 },
    #[error("triangulated point has non-positive depth")]
    NegativeDepth,
    #[error("reprojection error {error} px exceeds the gate")]
    ReprojectionGate { error: f64 },
    #[error("no model passes the cheirality check")]
    Cheirality,
    #[error("ambiguous reconstruction: best solution has {best} good points, runner-up {second}")]
    Ambiguous { best: usize, second: usize },
    #[error("median parallax {degrees} deg below {required} deg")]
    LowParallax { degrees: f64, required: f64 },
    #[error("RANSAC found no model")]
    NoModel,
    #[error("only {inliers} inliers after optimization")]
    TooFewInliers { inliers: usize },
    #[error("singular linear system")]
    Singular,
}

/// Pinhole projection of a camera-frame point, or `None` behind the camera.
#[inline]
pub fn project_pinhole(cam: &CameraModel, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    if p.z <= 1e-12 {
        return None;
    }
    let iz = 1.0 / p.z;
    Some(Vector2::new(cam.fx * p.x * iz + cam.cx, cam.fy * p.y * iz + cam.cy))
}

/// Projected pixel of world point `x` seen from `pose`, with the Jacobians of
/// the projection with respect to a left-multiplied pose increment
/// `Exp(delta) * pose` (translation first, then rotation) and to the point.
pub fn reprojection_jacobians(
    pose: &Pose,
    x: &Vector3<f64>,
    cam: &CameraModel,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let pc = pose.transform_point(x);
    let uv = project_pinhole(cam, &pc)?;
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let jp = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * pc.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * pc.y * iz2,
    );
    let mut jpose = Matrix2x6::zeros();
    jpose.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
    jpose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(jp * (-hat(&pc))));
    let jpoint = jp * pose.rotation_matrix();
    Some((uv, jpose, jpoint))
}

/// Intrinsic matrix of the ideal pinhole.
pub fn intrinsic_matrix(cam: &CameraModel) -> Matrix3<f64> {
    Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0)
}

/// Huber weight for a residual of norm `e`.
#[inline]
pub(crate) fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

/// Huber cost of a squared residual norm.
#[inline]
pub(crate) fn huber_cost(e2: f64, delta: f64) -> f64 {
    if e2 <= delta * delta {
        e2
    } else {
        2.0 * delta * e2.sqrt() - delta * delta
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::Rng;

    use crate::types::{CameraModel, Pose};

    pub fn camera() -> CameraModel {
        CameraModel::pinhole(240, 180, 200.0, 200.0, 120.0, 90.0)
    }

    pub fn random_pose<R: Rng>(rng: &mut R, rot: f64, trans: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis.normalize() };
        Pose::new(
            UnitQuaternion::from_scaled_axis(axis * rng.random_range(-rot..rot)),
            Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            ),
        )
    }
}
