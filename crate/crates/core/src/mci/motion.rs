//! Planar motion fitting and mean scene depth from feature tracks.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::MciError;
use crate::sfm::{huber_cost, huber_weight, project_pinhole};
use crate::types::{CameraModel, PlanarGroup, PlanarTwist, Pose, Similarity2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionFitConfig {
    pub huber_delta_px: f64,
    pub inlier_px: f64,
    pub max_iterations: usize,
}

impl Default for MotionFitConfig {
    fn default() -> Self {
        Self {
            huber_delta_px: 2.0,
            inlier_px: 3.0,
            max_iterations: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MotionFit {
    /// Per-second twist: `Log(S) / dt`.
    pub twist: PlanarTwist,
    pub transform: Similarity2,
    pub inliers: Vec<bool>,
    /// Robust cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl MotionFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn dof(group: PlanarGroup) -> usize {
    match group {
        PlanarGroup::Se2 => 3,
        PlanarGroup::Sim2 => 4,
    }
}

fn residuals(s: &Similarity2, pts: &[(Vector2<f64>, Vector2<f64>)], f: f64) -> Vec<Vector2<f64>> {
    pts.iter().map(|(a, b)| (s.transform_point(a) - b) * f).collect()
}

fn robust_cost(res: &[Vector2<f64>], mask: &[bool], delta: f64) -> f64 {
    res.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(r, _)| huber_cost(r.norm_squared(), delta))
        .sum()
}

/// Gauss-Newton on `sum rho(|S a - b|)` with left increments `Exp(d) * S`,
/// only accepting steps that do not increase the cost.
fn gauss_newton(
    mut s: Similarity2,
    pts: &[(Vector2<f64>, Vector2<f64>)],
    mask: &[bool],
    group: PlanarGroup,
    f: f64,
    cfg: &MotionFitConfig,
    history: &mut Vec<f64>,
) -> Result<(Similarity2, usize), MciError> {
    let n = dof(group);
    let mut res = residuals(&s, pts, f);
    let mut c = robust_cost(&res, mask, cfg.huber_delta_px);
    history.push(c);
    for it in 1..=cfg.max_iterations {
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for (((a, _), r), _) in pts.iter().zip(&res).zip(mask).filter(|(_, &m)| m) {
            let y = s.transform_point(a);
            // d(S a)/d(vx, vy, omega, lambda) at the identity increment,
            // scaled to pixels.
            let mut j = DMatrix::<f64>::zeros(2, n);
            j[(0, 0)] = f;
            j[(1, 1)] = f;
            j[(0, 2)] = -y.y * f;
            j[(1, 2)] = y.x * f;
            if n == 4 {
                j[(0, 3)] = y.x * f;
                j[(1, 3)] = y.y * f;
            }
            let w = huber_weight(r.norm(), cfg.huber_delta_px);
            let rv = DVector::from_column_slice(&[r.x, r.y]);
            h += w * j.transpose() * &j;
            g += w * j.transpose() * rv;
        }
        if g.norm() < 1e-14 {
            return Ok((s, it));
        }
        let Some(chol) = h.clone().cholesky() else {
            return Err(MciError::NonConvergent);
        };
        let dx = chol.solve(&(-&g));
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-6 {
            let d = &dx * step;
            let inc = PlanarTwist {
                group,
                v: Vector2::new(d[0], d[1]),
                omega: d[2],
                log_scale: if n == 4 { d[3] } else { 0.0 },
            };
            let cand = Similarity2::exp(&inc, 1.0).compose(&s);
            let cres = residuals(&cand, pts, f);
            let cc = robust_cost(&cres, mask, cfg.huber_delta_px);
            if cc <= c {
                let small = d.norm() < 1e-12 || c - cc <= 1e-14 * c.max(1e-300);
                s = cand;
                res = cres;
                c = cc;
                history.push(c);
                accepted = true;
                if small {
                    return Ok((s, it));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction left: converged to working precision.
            return Ok((s, it));
        }
    }
    Err(MciError::NonConvergent)
}

/// Fits a planar (SE2 or Sim2) transform mapping `ref` to `cur` pixels of
/// matched features and converts it to a per-second twist over `dt`.
pub fn fit_2d_motion(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    cam: &CameraModel,
    dt: f64,
    group: PlanarGroup,
    init: Option<&PlanarTwist>,
    cfg: &MotionFitConfig,
) -> Result<MotionFit, MciError> {
    if matches.len() < 3 {
        return Err(MciError::InsufficientMatches {
            needed: 3,
            got: matches.len(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MciError::InvalidInterval(dt));
    }
    let f = cam.focal();
    let pts: Vec<_> = matches
        .iter()
        .map(|(a, b)| (cam.normalize(a), cam.normalize(b)))
        .collect();
    let start = match init {
        Some(t) if t.is_finite() => {
            let t = PlanarTwist { group, ..*t };
            Similarity2::exp(&t, dt)
        }
        _ => Similarity2::identity(),
    };
    let all = vec![true; pts.len()];
    let mut history = Vec::new();
    let (mut s, mut iterations) = gauss_newton(start, &pts, &all, group, f, cfg, &mut history)?;
    let gate = |s: &Similarity2| -> Vec<bool> {
        residuals(s, &pts, f)
            .iter()
            .map(|r| r.norm() < cfg.inlier_px)
            .collect()
    };
    let mut inliers = gate(&s);
    // Refit on the inliers so gross outliers stop pulling through the
    // linear part of the kernel.
    if inliers.iter().filter(|&&b| b).count() >= 3 && inliers.iter().any(|&b| !b) {
        let mut h2 = Vec::new();
        let (s2, it2) = gauss_newton(s, &pts, &inliers, group, f, cfg, &mut h2)?;
        s = s2;
        iterations += it2;
        inliers = gate(&s);
    }
    let log = s.log(group).map_err(|_| MciError::NonConvergent)?;
    Ok(MotionFit {
        twist: log.scaled(1.0 / dt),
        transform: s,
        inliers,
        cost_history: history,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub grid: usize,
    pub huber_delta_px: f64,
    /// Minimum RMS residual change (pixels) for a 10% inverse-depth change.
    pub min_sensitivity_px: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.05,
            max_depth: 1000.0,
            grid: 240,
            huber_delta_px: 2.0,
            min_sensitivity_px: 0.05,
        }
    }
}

fn depth_cost(rho: f64, rays: &[(Vector3<f64>, Vector2<f64>)], t: &Pose, cam: &CameraModel, delta: f64) -> f64 {
    let z = 1.0 / rho;
    rays.iter()
        .map(|(ray, obs)| {
            let e2 = project_pinhole(cam, &t.transform_point(&(ray * z)))
                .map_or(1e6, |u| (u - obs).norm_squared());
            huber_cost(e2, delta)
        })
        .sum()
}

/// Depth of a fronto-parallel scene shared by all matches, given the relative
/// transform `t` that maps reference-frame points into the current frame.
pub fn estimate_mean_depth(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    t: &Pose,
    cam: &CameraModel,
    cfg: &DepthConfig,
) -> Result<f64, MciError> {
    if matches.len() < 5 {
        return Err(MciError::InsufficientMatches {
            needed: 5,
            got: matches.len(),
        });
    }
    if t.translation.norm() <= 1e-4 {
        return Err(MciError::Unobservable);
    }
    let rays: Vec<_> = matches
        .iter()
        .map(|(a, b)| {
            let n = cam.normalize(a);
            (Vector3::new(n.x, n.y, 1.0), *b)
        })
        .collect();
    let cost = |rho: f64| depth_cost(rho, &rays, t, cam, cfg.huber_delta_px);
    let (lo, hi) = ((1.0 / cfg.max_depth).ln(), (1.0 / cfg.min_depth).ln());
    // Coarse log-spaced scan in inverse depth, then golden-section refinement
    // inside the bracketing cells.
    let n = cfg.grid.max(8);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let costs: Vec<f64> = grid.iter().map(|&l| cost(l.exp())).collect();
    let (ib, _) = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let mut a = grid[ib.saturating_sub(1)];
    let mut b = grid[(ib + 1).min(n - 1)];
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (cost(x1.exp()), cost(x2.exp()));
    for _ in 0..100 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = cost(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = cost(x2.exp());
        }
    }
    let mut best = (0.5 * (a + b), cost((0.5 * (a + b)).exp()));
    if costs[ib] < best.1 {
        best = (grid[ib], costs[ib]);
    }
    let rho = best.0.exp();
    // Flat residual: the depth barely changes the reprojections.
    let curvature = (cost(rho * 1.1) + cost(rho * 0.9) - 2.0 * best.1) / (2.0 * rays.len() as f64);
    if !(curvature > cfg.min_sensitivity_px * cfg.min_sensitivity_px) {
        return Err(MciError::Unreliable);
    }
    Ok((1.0 / rho).clamp(cfg.min_depth, cfg.max_depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::pinhole(240, 180, 200.0, 200.0, 120.0, 90.0)
    }

    fn planar_tracks(rng: &mut ChaCha8Rng, s: &Similarity2, n: usize) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let c = cam();
        (0..n)
            .map(|_| {
                let a = Vector2::new(rng.random_range(10.0..230.0), rng.random_range(10.0..170.0));
                let b = c.denormalize(&s.transform_point(&c.normalize(&a)));
                (a, b)
            })
            .collect()
    }

    #[test]
    fn recovers_noiseless_sim2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = PlanarTwist::sim2(0.4, -0.3, 0.5, 0.2);
        let dt = 0.1;
        let m = planar_tracks(&mut rng, &Similarity2::exp(&truth, dt), 40);
        let fit = fit_2d_motion(&m, &cam(), dt, PlanarGroup::Sim2, None, &MotionFitConfig::default()).unwrap();
        assert!((fit.twist.v - truth.v).norm() < 1e-6);
        assert!((fit.twist.omega - truth.omega).abs() < 1e-6);
        assert!((fit.twist.log_scale - truth.log_scale).abs() < 1e-6);
        assert!(fit.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn identical_points_give_zero_twist() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = planar_tracks(&mut rng, &Similarity2::identity(), 10);
        let fit = fit_2d_motion(&m, &cam(), 0.01, PlanarGroup::Se2, None, &MotionFitConfig::default()).unwrap();
        assert_eq!(fit.twist.v, Vector2::zeros());
        assert_eq!(fit.twist.omega, 0.0);
    }

    #[test]
    fn tolerates_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = PlanarTwist::sim2(0.2, 0.1, -0.3, 0.05);
        let dt = 0.05;
        let mut m = planar_tracks(&mut rng, &Similarity2::exp(&truth, dt), 50);
        for k in 0..10 {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            m[k * 5].1 += Vector2::new(a.cos(), a.sin()) * 50.0;
        }
        let fit = fit_2d_motion(&m, &cam(), dt, PlanarGroup::Sim2, None, &MotionFitConfig::default()).unwrap();
        assert!((fit.twist.v - truth.v).norm() < 1e-3);
        assert!((fit.twist.omega - truth.omega).abs() < 1e-3);
        assert!((fit.twist.log_scale - truth.log_scale).abs() < 1e-3);
        assert_eq!(fit.inlier_count(), 40);
    }

    #[test]
    fn rejects_degenerate_input() {
        let m = vec![(Vector2::new(1.0, 1.0), Vector2::new(2.0, 2.0)); 2];
        let c = MotionFitConfig::default();
        assert!(matches!(
            fit_2d_motion(&m, &cam(), 0.1, PlanarGroup::Sim2, None, &c),
            Err(MciError::InsufficientMatches { .. })
        ));
        let m = vec![(Vector2::new(1.0, 1.0), Vector2::new(2.0, 2.0)); 3];
        assert!(matches!(
            fit_2d_motion(&m, &cam(), 0.0, PlanarGroup::Sim2, None, &c),
            Err(MciError::InvalidInterval(_))
        ));
    }

    fn plane_matches(t: &Pose, depth: f64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let c = cam();
        let mut out = Vec::new();
        for y in (20..170).step_by(30) {
            for x in (20..230).step_by(30) {
                let a = Vector2::new(x as f64, y as f64);
                let n = c.normalize(&a);
                let p = Vector3::new(n.x, n.y, 1.0) * depth;
                out.push((a, project_pinhole(&c, &t.transform_point(&p)).unwrap()));
            }
        }
        out
    }

    #[test]
    fn mean_depth_of_plane() {
        let t = Pose::new(
            UnitQuaternion::from_euler_angles(0.01, -0.02, 0.005),
            Vector3::new(0.05, -0.02, 0.01),
        );
        let m = plane_matches(&t, 3.0);
        let d = estimate_mean_depth(&m, &t, &cam(), &DepthConfig::default()).unwrap();
        assert!((d - 3.0).abs() < 0.05, "{d}");
        let c = DepthConfig::default();
        let rays: Vec<_> = m
            .iter()
            .map(|(a, b)| {
                let n = cam().normalize(a);
                (Vector3::new(n.x, n.y, 1.0), *b)
            })
            .collect();
        let at = |z: f64| depth_cost(1.0 / z, &rays, &t, &cam(), c.huber_delta_px);
        assert!(at(d) <= at(0.5 * d) && at(d) <= at(2.0 * d));
    }

    #[test]
    fn pure_rotation_is_unobservable() {
        let t = Pose::from_rotation(UnitQuaternion::from_euler_angles(0.0, 0.05, 0.0));
        let m = plane_matches(&t, 3.0);
        assert_eq!(
            estimate_mean_depth(&m, &t, &cam(), &DepthConfig::default()),
            Err(MciError::Unobservable)
        );
    }
}
