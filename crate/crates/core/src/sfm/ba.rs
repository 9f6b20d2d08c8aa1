//! Levenberg-Marquardt bundle adjustment with Schur elimination of the
//! point blocks.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6x3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::pose_opt::left_update;
use super::{huber_cost, huber_weight, project_pinhole, reprojection_jacobians, SfmError, CHI2_2DOF};
use crate::types::{CameraModel, Pose};

const BEHIND_PENALTY_PX: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaObservation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
    /// Scalar information weight (isotropic).
    pub weight: f64,
}

/// Camera-from-world poses, world points and their pixel observations.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BaProblem {
    pub poses: Vec<Pose>,
    pub fixed: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<BaObservation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub max_iterations: usize,
    pub huber_delta: f64,
    pub chi2_gate: f64,
    pub initial_lambda: f64,
    /// Remove gated observations from the problem after convergence.
    pub remove_outliers: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            huber_delta: 2.4,
            chi2_gate: CHI2_2DOF,
            initial_lambda: 1e-4,
            remove_outliers: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Per input observation: failed the chi-square gate after convergence.
    pub outliers: Vec<bool>,
    /// Points left out because fewer than two observations constrain them.
    pub excluded_points: Vec<bool>,
    pub rolled_back: bool,
}

fn active_points(problem: &BaProblem) -> Vec<bool> {
    let mut count = vec![0usize; problem.points.len()];
    for o in &problem.observations {
        count[o.point] += 1;
    }
    count.iter().map(|&c| c >= 2).collect()
}

fn obs_sq_error(problem: &BaProblem, o: &BaObservation, cam: &CameraModel) -> Option<f64> {
    let pc = problem.poses[o.pose].transform_point(&problem.points[o.point]);
    project_pinhole(cam, &pc).map(|u| o.weight * (u - o.pixel).norm_squared())
}

fn cost_masked(problem: &BaProblem, cam: &CameraModel, delta: f64, active: &[bool]) -> f64 {
    problem
        .observations
        .iter()
        .filter(|o| active[o.point])
        .map(|o| {
            huber_cost(
                obs_sq_error(problem, o, cam).unwrap_or(BEHIND_PENALTY_PX * BEHIND_PENALTY_PX),
                delta,
            )
        })
        .sum()
}

/// Robust reprojection cost over the points with at least two observations.
pub fn ba_cost(problem: &BaProblem, cam: &CameraModel, huber_delta: f64) -> f64 {
    cost_masked(problem, cam, huber_delta, &active_points(problem))
}

struct Normal {
    b: DMatrix<f64>,
    gp: DVector<f64>,
    c: Vec<Matrix3<f64>>,
    gc: Vec<Vector3<f64>>,
    // Per point: (free pose slot, 6x3 coupling block).
    e: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

fn build_normal(
    problem: &BaProblem,
    cam: &CameraModel,
    delta: f64,
    slot: &[Option<usize>],
    nf: usize,
    active: &[bool],
) -> Normal {
    let np = problem.points.len();
    let mut n = Normal {
        b: DMatrix::zeros(6 * nf, 6 * nf),
        gp: DVector::zeros(6 * nf),
        c: vec![Matrix3::zeros(); np],
        gc: vec![Vector3::zeros(); np],
        e: vec![Vec::new(); np],
    };
    for o in &problem.observations {
        if !active[o.point] {
            continue;
        }
        let Some((u, jpose, jpoint)) =
            reprojection_jacobians(&problem.poses[o.pose], &problem.points[o.point], cam)
        else {
            continue;
        };
        let r = u - o.pixel;
        let w = o.weight * huber_weight(o.weight.sqrt() * r.norm(), delta);
        n.c[o.point] += w * jpoint.transpose() * jpoint;
        n.gc[o.point] += w * jpoint.transpose() * r;
        if let Some(s) = slot[o.pose] {
            let bb = w * jpose.transpose() * jpose;
            let mut view = n.b.fixed_view_mut::<6, 6>(6 * s, 6 * s);
            view += bb;
            let gg = w * jpose.transpose() * r;
            let mut gv = n.gp.fixed_rows_mut::<6>(6 * s);
            gv += gg;
            n.e[o.point].push((s, w * jpose.transpose() * jpoint));
        }
    }
    n
}

/// Solves the damped normal equations by eliminating the points first.
fn solve_schur(n: &Normal, lambda: f64, nf: usize, active: &[bool]) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let damp3 = |m: &Matrix3<f64>| {
        let mut d = *m;
        for k in 0..3 {
            d[(k, k)] += lambda * m[(k, k)].max(1e-9);
        }
        d
    };
    let mut s = n.b.clone();
    for k in 0..6 * nf {
        s[(k, k)] += lambda * n.b[(k, k)].max(1e-9);
    }
    let mut rhs = -n.gp.clone();
    let mut cinv = vec![Matrix3::zeros(); n.c.len()];
    for (i, c) in n.c.iter().enumerate() {
        if !active[i] {
            continue;
        }
        cinv[i] = damp3(c).try_inverse()?;
        for &(a, ea) in &n.e[i] {
            let eac = ea * cinv[i];
            let mut rv = rhs.fixed_rows_mut::<6>(6 * a);
            rv += eac * n.gc[i];
            for &(b, eb) in &n.e[i] {
                let mut sv = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                sv -= eac * eb.transpose();
            }
        }
    }
    let dp = if nf > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let dc = (0..n.c.len())
        .map(|i| {
            if !active[i] {
                return Vector3::zeros();
            }
            let mut r = -n.gc[i];
            for &(a, ea) in &n.e[i] {
                r -= ea.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            cinv[i] * r
        })
        .collect();
    Some((dp, dc))
}

/// Jointly refines free poses and points. Poses flagged in `fixed` pin the
/// gauge; when none is flagged the first pose is held fixed.
pub fn local_bundle_adjustment(
    problem: &mut BaProblem,
    cam: &CameraModel,
    cfg: &BaConfig,
) -> Result<BaReport, SfmError> {
    if problem.poses.len() < 2 {
        return Err(SfmError::InsufficientData {
            needed: 2,
            got: problem.poses.len(),
        });
    }
    if problem.fixed.len() != problem.poses.len() {
        problem.fixed.resize(problem.poses.len(), false);
    }
    if !problem.fixed.iter().any(|&f| f) {
        problem.fixed[0] = true;
    }
    let active = active_points(problem);
    let mut slot = vec![None; problem.poses.len()];
    let mut nf = 0;
    for (i, f) in problem.fixed.iter().enumerate() {
        if !f {
            slot[i] = Some(nf);
            nf += 1;
        }
    }
    let backup = (problem.poses.clone(), problem.points.clone());
    let delta = cfg.huber_delta;
    let mut c = cost_masked(problem, cam, delta, &active);
    let mut report = BaReport {
        initial_cost: c,
        cost_history: vec![c],
        excluded_points: active.iter().map(|a| !a).collect(),
        ..Default::default()
    };
    let mut lambda = cfg.initial_lambda;
    'outer: while report.iterations < cfg.max_iterations {
        report.iterations += 1;
        if c < 1e-24 {
            break;
        }
        let n = build_normal(problem, cam, delta, &slot, nf, &active);
        let gnorm = n.gp.norm() + n.gc.iter().map(|g| g.norm()).sum::<f64>();
        if gnorm < 1e-14 {
            break;
        }
        loop {
            let Some((dp, dc)) = solve_schur(&n, lambda, nf, &active) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let saved = (problem.poses.clone(), problem.points.clone());
            for (i, s) in slot.iter().enumerate() {
                if let Some(s) = s {
                    let d: Vector6<f64> = dp.fixed_rows::<6>(6 * s).into_owned();
                    problem.poses[i] = left_update(&problem.poses[i], &d);
                }
            }
            for (p, d) in problem.points.iter_mut().zip(&dc) {
                *p += d;
            }
            let cc = cost_masked(problem, cam, delta, &active);
            if cc.is_finite() && cc < c {
                let decrease = c - cc;
                c = cc;
                report.accepted_steps += 1;
                report.cost_history.push(c);
                lambda = (lambda * 0.1).max(1e-12);
                let step = dp.norm() + dc.iter().map(|d| d.norm()).sum::<f64>();
                if step < 1e-12 || decrease < 1e-14 * c.max(1e-300) {
                    break 'outer;
                }
                break;
            }
            (problem.poses, problem.points) = saved;
            lambda *= 10.0;
            if lambda > 1e12 {
                break 'outer;
            }
        }
    }
    if !(c.is_finite() && c <= report.initial_cost) {
        (problem.poses, problem.points) = backup;
        c = report.initial_cost;
        report.rolled_back = true;
    }
    report.final_cost = c;
    report.outliers = problem
        .observations
        .iter()
        .map(|o| active[o.point] && obs_sq_error(problem, o, cam).is_none_or(|e2| e2 > cfg.chi2_gate))
        .collect();
    if cfg.remove_outliers {
        let mut k = 0;
        problem.observations.retain(|_| {
            k += 1;
            !report.outliers[k - 1]
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::testing::camera;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng, n_poses: usize, n_points: usize) -> BaProblem {
        let cam = camera();
        let poses: Vec<Pose> = (0..n_poses)
            .map(|i| {
                let c = Vector3::new(0.3 * i as f64, 0.05 * (i as f64).sin(), 0.0);
                let r = UnitQuaternion::from_euler_angles(0.02 * i as f64, -0.03 * i as f64, 0.01);
                Pose::new(r, -(r * c))
            })
            .collect();
        let points: Vec<Vector3<f64>> = (0..n_points)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.5..2.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(3.0..7.0),
                )
            })
            .collect();
        let mut observations = Vec::new();
        for (pi, p) in poses.iter().enumerate() {
            for (xi, x) in points.iter().enumerate() {
                let u = project_pinhole(&cam, &p.transform_point(x)).unwrap();
                observations.push(BaObservation {
                    pose: pi,
                    point: xi,
                    pixel: u,
                    weight: 1.0,
                });
            }
        }
        BaProblem {
            fixed: (0..n_poses).map(|i| i < 2).collect(),
            poses,
            points,
            observations,
        }
    }

    fn rms(p: &BaProblem) -> f64 {
        let cam = camera();
        let s: f64 = p
            .observations
            .iter()
            .map(|o| obs_sq_error(p, o, &cam).unwrap())
            .sum();
        (s / p.observations.len() as f64).sqrt()
    }

    #[test]
    fn converges_from_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = scene(&mut rng, 5, 60);
        for x in p.points.iter_mut() {
            *x += Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.01 * x.norm();
        }
        for i in 2..5 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
            p.poses[i] = Pose::from_rotation(UnitQuaternion::from_scaled_axis(axis * 2f64.to_radians())).compose(&p.poses[i]);
        }
        let cfg = BaConfig {
            max_iterations: 50,
            ..Default::default()
        };
        let r = local_bundle_adjustment(&mut p, &camera(), &cfg).unwrap();
        assert!(rms(&p) < 1e-6, "rms {}", rms(&p));
        assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(!r.rolled_back);
        assert!(r.outliers.iter().all(|&o| !o));
    }

    #[test]
    fn optimal_input_takes_no_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = scene(&mut rng, 3, 20);
        let before = p.clone();
        let r = local_bundle_adjustment(&mut p, &camera(), &BaConfig::default()).unwrap();
        assert_eq!(r.accepted_steps, 0);
        assert_eq!(r.initial_cost, r.final_cost);
        assert_eq!(p.poses, before.poses);
    }

    #[test]
    fn cost_is_gauge_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = scene(&mut rng, 4, 30);
        for o in p.observations.iter_mut() {
            o.pixel += Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        }
        let g = Pose::new(UnitQuaternion::from_euler_angles(0.4, -0.7, 1.1), Vector3::new(3.0, -2.0, 5.0));
        let ginv = g.inverse();
        let mut q = p.clone();
        for pose in q.poses.iter_mut() {
            *pose = pose.compose(&ginv);
        }
        for x in q.points.iter_mut() {
            *x = g.transform_point(x);
        }
        let (a, b) = (ba_cost(&p, &camera(), 2.4), ba_cost(&q, &camera(), 2.4));
        assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn single_observation_points_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = scene(&mut rng, 3, 10);
        p.points.push(Vector3::new(0.0, 0.0, 4.0));
        p.observations.push(BaObservation {
            pose: 2,
            point: 10,
            pixel: Vector2::new(5.0, 5.0),
            weight: 1.0,
        });
        let r = local_bundle_adjustment(&mut p, &camera(), &BaConfig::default()).unwrap();
        assert!(r.excluded_points[10]);
        assert_eq!(p.points[10], Vector3::new(0.0, 0.0, 4.0));
    }

    #[test]
    fn gross_outliers_are_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = scene(&mut rng, 4, 30);
        let n = p.observations.len();
        p.observations[7].pixel += Vector2::new(40.0, 0.0);
        let r = local_bundle_adjustment(&mut p, &camera(), &BaConfig::default()).unwrap();
        assert!(r.outliers[7]);
        assert_eq!(p.observations.len(), n - r.outliers.iter().filter(|&&o| o).count());
        assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }
}
