//! Trajectory metrics over atlases of disconnected pose graphs.
//!
//! Samples hold world-from-camera poses. Each graph of an estimated atlas
//! has its own gauge and, for monocular runs, its own scale.

use log::warn;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose,
}

impl TrajectorySample {
    pub fn new(t: f64, pose: Pose) -> Self {
        Self { t, pose }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no associated pairs")]
    NoPairs,
    #[error("estimated displacements are all zero")]
    ZeroDisplacement,
    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("every graph was excluded")]
    AllExcluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpeComponent {
    /// Translation error per metre travelled.
    Position,
    /// Rotation error in degrees per metre travelled.
    Rotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    PerGraph,
    None,
}

pub const DEFAULT_MAX_DT: f64 = 0.01;

/// Greedy matching by smallest time difference: all candidate pairs within
/// `max_dt` are taken in order of |dt| (ties by index), each sample used at
/// most once. Returned as `(est, gt)` index pairs sorted by estimate index.
pub fn associate(est: &[TrajectorySample], gt: &[TrajectorySample], max_dt: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let lo = gt.partition_point(|g| g.t < e.t - max_dt);
        for (j, g) in gt.iter().enumerate().skip(lo) {
            if g.t > e.t + max_dt {
                break;
            }
            let d = (g.t - e.t).abs();
            if d <= max_dt {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_e, mut used_g) = (vec![false; est.len()], vec![false; gt.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median ratio of ground-truth to estimated displacement between
/// consecutive `(est, gt)` pose pairs.
pub fn align_scale(pairs: &[(Pose, Pose)]) -> Result<f64, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            needed: 2,
            got: pairs.len(),
        });
    }
    let ratios: Vec<f64> = pairs
        .windows(2)
        .filter_map(|w| {
            let de = (w[1].0.translation - w[0].0.translation).norm();
            let dg = (w[1].1.translation - w[0].1.translation).norm();
            (de > 1e-12).then(|| dg / de)
        })
        .collect();
    median(ratios).ok_or(EvalError::ZeroDisplacement)
}

fn paired(est: &[TrajectorySample], gt: &[TrajectorySample], max_dt: f64) -> Vec<(Pose, Pose)> {
    associate(est, gt, max_dt)
        .into_iter()
        .map(|(i, j)| (est[i].pose, gt[j].pose))
        .collect()
}

fn relative(a: &Pose, b: &Pose, scale: f64) -> Pose {
    let mut d = a.inverse().compose(b);
    d.translation *= scale;
    d
}

/// Error of the estimated motion against the true motion between two
/// pairs: translation norm and rotation angle (radians) of `dG^-1 * dE`.
/// Exactly zero when the two motions are bit-identical.
fn relative_error(e: &(Pose, Pose), f: &(Pose, Pose), scale: f64) -> (f64, f64, UnitQuaternion<f64>) {
    let de = relative(&e.0, &f.0, scale);
    let dg = relative(&e.1, &f.1, 1.0);
    let q = dg.rotation.inverse() * de.rotation;
    let t = dg.rotation.inverse_transform_vector(&(de.translation - dg.translation));
    // conj(a) * b written out so that equal inputs cancel exactly.
    let (a, b) = (dg.rotation.quaternion(), de.rotation.quaternion());
    let imag = b.imag() * a.w - a.imag() * b.w - a.imag().cross(&b.imag());
    let angle = 2.0 * imag.norm().atan2(a.coords.dot(&b.coords).abs());
    (t.norm(), angle, q)
}

fn path_length(poses: impl Iterator<Item = Vector3<f64>>) -> f64 {
    let mut last: Option<Vector3<f64>> = None;
    let mut d = 0.0;
    for p in poses {
        if let Some(q) = last {
            d += (p - q).norm();
        }
        last = Some(p);
    }
    d
}

/// Mean over graphs of the summed consecutive relative errors divided by
/// the ground-truth distance and the number of pairs in the graph.
pub fn rpe_bar(
    atlas: &[Vec<TrajectorySample>],
    gt: &[TrajectorySample],
    component: RpeComponent,
    scale_mode: ScaleMode,
    max_dt: f64,
) -> Result<f64, EvalError> {
    let mut values = Vec::new();
    for (k, graph) in atlas.iter().enumerate() {
        let pairs = paired(graph, gt, max_dt);
        if pairs.len() < 2 {
            warn!("graph {k}: {} associated pairs, excluded", pairs.len());
            continue;
        }
        let dist = path_length(pairs.iter().map(|p| p.1.translation));
        if !(dist > 0.0) {
            warn!("graph {k}: no ground-truth motion, excluded");
            continue;
        }
        let scale = match (component, scale_mode) {
            (RpeComponent::Position, ScaleMode::PerGraph) => match align_scale(&pairs) {
                Ok(s) => s,
                Err(e) => {
                    warn!("graph {k}: {e}, excluded");
                    continue;
                }
            },
            _ => 1.0,
        };
        let sum: f64 = pairs
            .windows(2)
            .map(|w| {
                let (t, r, _) = relative_error(&w[0], &w[1], scale);
                match component {
                    RpeComponent::Position => t,
                    RpeComponent::Rotation => r.to_degrees(),
                }
            })
            .sum();
        values.push(sum / (dist * (pairs.len() - 1) as f64));
    }
    if values.is_empty() {
        return Err(EvalError::AllExcluded);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub time: f64,
    pub distance: f64,
    pub product: f64,
}

/// Total time and distance covered by the atlas, and their product.
pub fn stability(atlas: &[Vec<TrajectorySample>]) -> Stability {
    let mut s = Stability::default();
    for g in atlas {
        for w in g.windows(2) {
            s.time += (w[1].t - w[0].t).abs();
            s.distance += (w[1].position() - w[0].position()).norm();
        }
    }
    s.product = s.time * s.distance;
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinError {
    pub distance: f64,
    pub translation: f64,
    pub yaw_deg: f64,
    pub pairs: usize,
}

/// Mean translation and absolute yaw error over the first `pairs_per_bin`
/// pose pairs whose ground-truth path separation first reaches each
/// distance. Bins without any qualifying pair are `None`.
pub fn binned_relative_errors(
    graph: &[TrajectorySample],
    gt: &[TrajectorySample],
    distances: &[f64],
    pairs_per_bin: usize,
    max_dt: f64,
) -> Result<Vec<Option<BinError>>, EvalError> {
    let pairs = paired(graph, gt, max_dt);
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let scale = if pairs.len() >= 2 { align_scale(&pairs).unwrap_or(1.0) } else { 1.0 };
    // Cumulative ground-truth distance along the associated samples.
    let mut cum = vec![0.0; pairs.len()];
    for k in 1..pairs.len() {
        cum[k] = cum[k - 1] + (pairs[k].1.translation - pairs[k - 1].1.translation).norm();
    }
    Ok(distances
        .iter()
        .map(|&d| {
            let (mut tr, mut yaw, mut n) = (0.0, 0.0, 0usize);
            for i in 0..pairs.len() {
                if n >= pairs_per_bin {
                    break;
                }
                let j = cum.partition_point(|&c| c - cum[i] < d);
                if j >= pairs.len() {
                    break;
                }
                let (t, _, q) = relative_error(&pairs[i], &pairs[j], scale);
                tr += t;
                yaw += q.euler_angles().2.abs().to_degrees();
                n += 1;
            }
            (n > 0).then(|| BinError {
                distance: d,
                translation: tr / n as f64,
                yaw_deg: yaw / n as f64,
                pairs: n,
            })
        })
        .collect())
}

/// Position RMSE after a least-squares similarity alignment of the
/// estimate onto the ground truth.
pub fn ate_rmse(graph: &[TrajectorySample], gt: &[TrajectorySample], max_dt: f64) -> Result<f64, EvalError> {
    let pairs = paired(graph, gt, max_dt);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs {
            needed: 3,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0.translation).sum::<Vector3<f64>>() / n;
    let my = pairs.iter().map(|p| p.1.translation).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (e, g) in &pairs {
        let (x, y) = (e.translation - mx, g.translation - my);
        cov += y * x.transpose();
        var += x.norm_squared();
    }
    cov /= n;
    var /= n;
    if !(var > 0.0) {
        return Err(EvalError::ZeroDisplacement);
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sgn = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sgn[(2, 2)] = -1.0;
    }
    let r = u * sgn * vt;
    let s = (svd.singular_values.component_mul(&sgn.diagonal())).sum() / var;
    let t = my - s * r * mx;
    let se: f64 = pairs
        .iter()
        .map(|(e, g)| (s * r * e.translation + t - g.translation).norm_squared())
        .sum();
    Ok((se / n).sqrt())
}
