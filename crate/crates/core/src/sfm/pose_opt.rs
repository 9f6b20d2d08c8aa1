use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{huber_cost, huber_weight, project_pinhole, reprojection_jacobians, SfmError, CHI2_2DOF};
use crate::types::{CameraModel, Pose, SpatialTwist};

/// Residual charged for a point that falls behind the camera.
const BEHIND_PENALTY_PX: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseObservation {
    pub point: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseOptConfig {
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub chi2_gate: f64,
    pub min_inliers: usize,
    /// Optimize, drop gated outliers, optimize again; this many times.
    pub rounds: usize,
}

impl Default for PoseOptConfig {
    fn default() -> Self {
        Self {
            huber_delta: 2.4,
            max_iterations: 20,
            chi2_gate: CHI2_2DOF,
            min_inliers: 4,
            rounds: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoseOptimization {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    /// Robust cost over the inliers at the returned pose.
    pub cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl PoseOptimization {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn left_update(pose: &Pose, dx: &Vector6<f64>) -> Pose {
    let tw = SpatialTwist::new(
        Vector3::new(dx[0], dx[1], dx[2]),
        Vector3::new(dx[3], dx[4], dx[5]),
    );
    Pose::exp(&tw, 1.0).compose(pose)
}

fn sq_error(pose: &Pose, o: &PoseObservation, cam: &CameraModel) -> Option<f64> {
    project_pinhole(cam, &pose.transform_point(&o.point)).map(|u| (u - o.pixel).norm_squared())
}

fn cost(pose: &Pose, obs: &[PoseObservation], active: &[bool], cam: &CameraModel, delta: f64) -> f64 {
    obs.iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(o, _)| {
            huber_cost(
                sq_error(pose, o, cam).unwrap_or(BEHIND_PENALTY_PX * BEHIND_PENALTY_PX),
                delta,
            )
        })
        .sum()
}

fn levenberg_marquardt(
    mut pose: Pose,
    obs: &[PoseObservation],
    active: &[bool],
    cam: &CameraModel,
    cfg: &PoseOptConfig,
    history: &mut Vec<f64>,
) -> (Pose, usize) {
    let mut c = cost(&pose, obs, active, cam, cfg.huber_delta);
    if history.is_empty() {
        history.push(c);
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iterations {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (o, _) in obs.iter().zip(active).filter(|(_, &a)| a) {
            let Some((u, j, _)) = reprojection_jacobians(&pose, &o.point, cam) else {
                continue;
            };
            let r = u - o.pixel;
            let w = huber_weight(r.norm(), cfg.huber_delta);
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        if g.norm() < 1e-12 || c == 0.0 {
            break;
        }
        loop {
            let mut a = h;
            for k in 0..6 {
                a[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(dx) = a.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let cand = left_update(&pose, &dx);
            let cc = cost(&cand, obs, active, cam, cfg.huber_delta);
            if cc < c {
                let decrease = c - cc;
                pose = cand;
                c = cc;
                history.push(c);
                lambda = (lambda * 0.1).max(1e-12);
                if dx.norm() < 1e-8 || decrease < 1e-10 {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break 'outer;
            }
        }
    }
    (pose, iterations)
}

/// Motion-only refinement of a camera-from-world pose against known 3D
/// points, with Huber robustification and chi-square outlier gating.
pub fn optimize_pose(
    initial: &Pose,
    obs: &[PoseObservation],
    cam: &CameraModel,
    cfg: &PoseOptConfig,
) -> Result<PoseOptimization, SfmError> {
    if obs.len() < 4 {
        return Err(SfmError::InsufficientData {
            needed: 4,
            got: obs.len(),
        });
    }
    let gate = |pose: &Pose| -> Vec<bool> {
        obs.iter()
            .map(|o| sq_error(pose, o, cam).is_some_and(|e2| e2 <= cfg.chi2_gate))
            .collect()
    };
    let mut active = vec![true; obs.len()];
    let mut pose = *initial;
    let mut history = Vec::new();
    let mut iterations = 0;
    for round in 0..cfg.rounds.max(1) {
        if round > 0 {
            // Restarting with a new active set changes the cost function.
            history.clear();
        }
        let (p, it) = levenberg_marquardt(pose, obs, &active, cam, cfg, &mut history);
        pose = p;
        iterations += it;
        let next = gate(&pose);
        if next == active || next.iter().filter(|&&b| b).count() < cfg.min_inliers {
            break;
        }
        active = next;
    }
    let inliers = gate(&pose);
    let n = inliers.iter().filter(|&&b| b).count();
    if n < cfg.min_inliers {
        return Err(SfmError::TooFewInliers { inliers: n });
    }
    Ok(PoseOptimization {
        pose,
        cost: cost(&pose, obs, &inliers, cam, cfg.huber_delta),
        inliers,
        iterations,
        cost_history: history,
    })
}
