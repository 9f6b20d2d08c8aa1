//! Two-view reconstruction: homography and fundamental matrix RANSAC, model
//! selection, decomposition and cheirality voting.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{intrinsic_matrix, triangulate_normalized, SfmError};
use crate::types::{CameraModel, Pose};

const MIN_MATCHES: usize = 8;
const SAMPLE_SIZE: usize = 8;
/// Rays with a smaller parallax cosine than this count as triangulated.
const COS_PARALLAX_MIN: f64 = 0.99998;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoViewConfig {
    pub ransac_iterations: usize,
    /// Inlier threshold in pixels for transfer and epipolar distances.
    pub threshold_px: f64,
    pub seed: u64,
    /// Homography is chosen when S_H / (S_H + S_F) exceeds this.
    pub homography_ratio: f64,
    /// Best cheirality solution must beat the runner-up by this factor.
    pub strict_margin: f64,
    pub relaxed_margin: f64,
    pub strict_parallax_deg: f64,
    pub relaxed_parallax_deg: f64,
    /// Fraction of model inliers the winning solution must reconstruct.
    pub strict_good_fraction: f64,
    pub relaxed_good_fraction: f64,
}

impl Default for TwoViewConfig {
    fn default() -> Self {
        Self {
            ransac_iterations: 200,
            threshold_px: 1.5,
            seed: 0,
            homography_ratio: 0.4,
            strict_margin: 1.4,
            relaxed_margin: 1.0,
            strict_parallax_deg: 0.5,
            relaxed_parallax_deg: 0.2,
            strict_good_fraction: 0.9,
            relaxed_good_fraction: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoViewModel {
    Homography,
    Fundamental,
}

#[derive(Clone, Debug)]
pub struct TwoViewResult {
    /// Maps points from the first camera frame into the second; unit-norm
    /// translation.
    pub pose: Pose,
    pub inliers: Vec<bool>,
    /// Triangulated points in the first camera frame, per match.
    pub points: Vec<Option<Vector3<f64>>>,
    pub model: TwoViewModel,
    /// Median triangulation parallax in degrees.
    pub parallax_deg: f64,
}

impl TwoViewResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }

    pub fn median_depth(&self) -> Option<f64> {
        let mut z: Vec<f64> = self.points.iter().flatten().map(|p| p.z).collect();
        if z.is_empty() {
            return None;
        }
        z.sort_by(f64::total_cmp);
        Some(z[(z.len() - 1) / 2])
    }
}

/// Why initialization failed, with the RANSAC inlier mask when a model was
/// fitted (it can still be used to clean the matches).
#[derive(Clone, Debug)]
pub struct TwoViewRejection {
    pub reason: SfmError,
    pub inliers: Option<Vec<bool>>,
    /// On an ambiguous decomposition: every solution that passed the other
    /// gates, best first. A third view can tell them apart.
    pub candidates: Vec<TwoViewResult>,
}

impl TwoViewRejection {
    fn new(reason: SfmError, inliers: Option<Vec<bool>>) -> Self {
        Self {
            reason,
            inliers,
            candidates: Vec::new(),
        }
    }
}

/// Similarity that moves the centroid to the origin and sets the mean
/// distance to sqrt(2).
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let d = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if d > 1e-12 { std::f64::consts::SQRT_2 / d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply(m: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let h = m * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(h.x / h.z, h.y / h.z)
}

/// Right null vector of `rows` (padded to 9 rows when needed).
fn null_vector(rows: Vec<[f64; 9]>) -> Option<[f64; 9]> {
    let m = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(m, 9);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..9 {
            a[(i, j)] = r[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let mut out = [0.0; 9];
    for (j, o) in out.iter_mut().enumerate() {
        *o = v_t[(imin, j)];
    }
    Some(out)
}

fn to_matrix(h: [f64; 9]) -> Matrix3<f64> {
    Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8])
}

/// Homography mapping the first view to the second from normalized points.
fn compute_h(p1: &[Vector2<f64>], p2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let mut rows = Vec::with_capacity(2 * p1.len());
    for (a, b) in p1.iter().zip(p2) {
        rows.push([0.0, 0.0, 0.0, -a.x, -a.y, -1.0, b.y * a.x, b.y * a.y, b.y]);
        rows.push([a.x, a.y, 1.0, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x]);
    }
    null_vector(rows).map(to_matrix)
}

/// Fundamental matrix with `x2^T F x1 = 0`, rank two enforced.
fn compute_f(p1: &[Vector2<f64>], p2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let rows = p1
        .iter()
        .zip(p2)
        .map(|(a, b)| [b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0])
        .collect();
    let f = to_matrix(null_vector(rows)?);
    let svd = f.svd(true, true);
    let mut s = svd.singular_values;
    s[2] = 0.0;
    Some(svd.u? * Matrix3::from_diagonal(&s) * svd.v_t?)
}

/// Symmetric transfer score and inlier mask of a homography.
fn score_h(h: &Matrix3<f64>, m: &[(Vector2<f64>, Vector2<f64>)], th2: f64) -> (f64, Vec<bool>) {
    let Some(hinv) = h.try_inverse() else {
        return (0.0, vec![false; m.len()]);
    };
    let mut score = 0.0;
    let inl = m
        .iter()
        .map(|(a, b)| {
            let e21 = (apply(h, a) - b).norm_squared();
            let e12 = (apply(&hinv, b) - a).norm_squared();
            if !(e21 < th2 && e12 < th2) {
                return false;
            }
            score += (th2 - e21) + (th2 - e12);
            true
        })
        .collect();
    (score, inl)
}

/// Symmetric epipolar score; distances to epipolar lines are one-dimensional
/// so their inlier gate is tighter but they earn the same score scale.
fn score_f(f: &Matrix3<f64>, m: &[(Vector2<f64>, Vector2<f64>)], th2: f64) -> (f64, Vec<bool>) {
    let th2_line = th2 * 3.841 / 5.991;
    let mut score = 0.0;
    let inl = m
        .iter()
        .map(|(a, b)| {
            let x1 = Vector3::new(a.x, a.y, 1.0);
            let x2 = Vector3::new(b.x, b.y, 1.0);
            let l2 = f * x1;
            let l1 = f.transpose() * x2;
            let num = x2.dot(&l2);
            let d2 = num * num / (l2.x * l2.x + l2.y * l2.y);
            let d1 = num * num / (l1.x * l1.x + l1.y * l1.y);
            if !(d2 < th2_line && d1 < th2_line) {
                return false;
            }
            score += (th2 - d2) + (th2 - d1);
            true
        })
        .collect();
    (score, inl)
}

struct Fit {
    model: Matrix3<f64>,
    score: f64,
    inliers: Vec<bool>,
}

fn ransac(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    cfg: &TwoViewConfig,
    homography: bool,
) -> Option<Fit> {
    let p1: Vec<Vector2<f64>> = matches.iter().map(|m| m.0).collect();
    let p2: Vec<Vector2<f64>> = matches.iter().map(|m| m.1).collect();
    let t1 = hartley(&p1);
    let t2 = hartley(&p2);
    let n1: Vec<Vector2<f64>> = p1.iter().map(|p| apply(&t1, p)).collect();
    let n2: Vec<Vector2<f64>> = p2.iter().map(|p| apply(&t2, p)).collect();
    let t2inv = t2.try_inverse()?;
    let th2 = cfg.threshold_px * cfg.threshold_px;
    // Separate streams keep the two models' samples reproducible on their own.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ if homography { 0x4848 } else { 0x4646 });
    let denorm = |m: Matrix3<f64>| {
        if homography {
            t2inv * m * t1
        } else {
            t2.transpose() * m * t1
        }
    };
    let fit = |idx: &[usize]| -> Option<Matrix3<f64>> {
        let a: Vec<_> = idx.iter().map(|&i| n1[i]).collect();
        let b: Vec<_> = idx.iter().map(|&i| n2[i]).collect();
        let m = if homography { compute_h(&a, &b)? } else { compute_f(&a, &b)? };
        let m = denorm(m);
        m.iter().all(|v| v.is_finite()).then_some(m)
    };
    let score = |m: &Matrix3<f64>| {
        if homography {
            score_h(m, matches, th2)
        } else {
            score_f(m, matches, th2)
        }
    };
    let mut best: Option<Fit> = None;
    for _ in 0..cfg.ransac_iterations {
        let idx = rand::seq::index::sample(&mut rng, matches.len(), SAMPLE_SIZE).into_vec();
        let Some(m) = fit(&idx) else { continue };
        let (s, inl) = score(&m);
        if best.as_ref().is_none_or(|b| s > b.score) {
            best = Some(Fit {
                model: m,
                score: s,
                inliers: inl,
            });
        }
    }
    let mut best = best?;
    // Least-squares refit on the consensus set.
    let idx: Vec<usize> = (0..matches.len()).filter(|&i| best.inliers[i]).collect();
    if idx.len() >= SAMPLE_SIZE {
        if let Some(m) = fit(&idx) {
            let (s, inl) = score(&m);
            if s >= best.score {
                best = Fit {
                    model: m,
                    score: s,
                    inliers: inl,
                };
            }
        }
    }
    Some(best)
}

struct Check {
    good: usize,
    points: Vec<Option<Vector3<f64>>>,
    parallax_deg: f64,
}

/// Triangulates the inliers under `(r, t)` and counts the points that are in
/// front of both cameras and reproject within the gate.
fn check_rt(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    inliers: &[bool],
    cam: &CameraModel,
    th2: f64,
) -> Check {
    let rot = UnitQuaternion::from_matrix(r);
    let p1 = Pose::identity();
    let p2 = Pose::new(rot, *t);
    let c2 = -(rot.inverse() * t);
    let mut good = 0;
    let mut points = vec![None; matches.len()];
    let mut parallaxes = Vec::new();
    for (i, (a, b)) in matches.iter().enumerate() {
        if !inliers[i] {
            continue;
        }
        let na = cam.normalize(a);
        let nb = cam.normalize(b);
        let Some(x) = triangulate_normalized(&p1, &p2, &na, &nb) else {
            continue;
        };
        let ra = x;
        let rb = x - c2;
        let cos = ra.dot(&rb) / (ra.norm() * rb.norm());
        let x2 = p2.transform_point(&x);
        if (x.z <= 0.0 || x2.z <= 0.0) && cos < COS_PARALLAX_MIN {
            continue;
        }
        let reproj = |p: &Vector3<f64>, obs: &Vector2<f64>| {
            let u = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
            (u - obs).norm_squared()
        };
        if x.z > 0.0 && x2.z > 0.0 && (reproj(&x, a) > 4.0 * th2 || reproj(&x2, b) > 4.0 * th2) {
            continue;
        }
        good += 1;
        if cos < COS_PARALLAX_MIN && x.z > 0.0 && x2.z > 0.0 {
            points[i] = Some(x);
            parallaxes.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    parallaxes.sort_by(f64::total_cmp);
    let parallax_deg = if parallaxes.is_empty() {
        0.0
    } else {
        parallaxes[(parallaxes.len() - 1) / 2]
    };
    Check {
        good,
        points,
        parallax_deg,
    }
}

/// Motion hypotheses from a homography (Faugeras' eight solutions).
fn decompose_h(h: &Matrix3<f64>, cam: &CameraModel) -> Option<Vec<(Matrix3<f64>, Vector3<f64>)>> {
    let k = intrinsic_matrix(cam);
    let a = k.try_inverse()? * h * k;
    let svd = a.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let w = svd.singular_values;
    let s = u.determinant() * v_t.determinant();
    let (d1, d2, d3) = (w[0], w[1], w[2]);
    if d1 / d2 < 1.00001 || d2 / d3 < 1.00001 {
        return None;
    }
    let mut out = Vec::with_capacity(8);
    let aux1 = ((d1 * d1 - d2 * d2) / (d1 * d1 - d3 * d3)).sqrt();
    let aux3 = ((d2 * d2 - d3 * d3) / (d1 * d1 - d3 * d3)).sqrt();
    let x1 = [aux1, aux1, -aux1, -aux1];
    let x3 = [aux3, -aux3, aux3, -aux3];
    // d' = d2
    let aux_st = ((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)).sqrt() / ((d1 + d3) * d2);
    let ct = (d2 * d2 + d1 * d3) / ((d1 + d3) * d2);
    let st = [aux_st, -aux_st, -aux_st, aux_st];
    for i in 0..4 {
        let rp = Matrix3::new(ct, 0.0, -st[i], 0.0, 1.0, 0.0, st[i], 0.0, ct);
        let r = s * u * rp * v_t;
        let tp = Vector3::new(x1[i], 0.0, -x3[i]) * (d1 - d3);
        out.push((r, (u * tp).normalize()));
    }
    // d' = -d2
    let aux_sp = ((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)).sqrt() / ((d1 - d3) * d2);
    let cp = (d1 * d3 - d2 * d2) / ((d1 - d3) * d2);
    let sp = [aux_sp, -aux_sp, -aux_sp, aux_sp];
    for i in 0..4 {
        let rp = Matrix3::new(cp, 0.0, sp[i], 0.0, -1.0, 0.0, sp[i], 0.0, -cp);
        let r = s * u * rp * v_t;
        let tp = Vector3::new(x1[i], 0.0, x3[i]) * (d1 + d3);
        out.push((r, (u * tp).normalize()));
    }
    Some(out)
}

/// The four `(R, t)` factorizations of the essential matrix of `f`.
fn decompose_f(f: &Matrix3<f64>, cam: &CameraModel) -> Option<Vec<(Matrix3<f64>, Vector3<f64>)>> {
    let k = intrinsic_matrix(cam);
    let e = k.transpose() * f * k;
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let t = u.column(2).normalize();
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let fix = |r: Matrix3<f64>| if r.determinant() < 0.0 { -r } else { r };
    let r1 = fix(u * w * v_t);
    let r2 = fix(u * w.transpose() * v_t);
    Some(vec![(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Recovers the relative pose and initial structure from pixel matches
/// `(first view, second view)` in the ideal pinhole camera `cam`.
///
/// `relaxed` lowers the solution margin and parallax gates so that tiny
/// frames a few milliseconds apart can still yield motion priors.
pub fn two_view_init(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    cam: &CameraModel,
    relaxed: bool,
    cfg: &TwoViewConfig,
) -> Result<TwoViewResult, TwoViewRejection> {
    if matches.len() < MIN_MATCHES {
        return Err(TwoViewRejection::new(
            SfmError::InsufficientData {
                needed: MIN_MATCHES,
                got: matches.len(),
            },
            None,
        ));
    }
    let fh = ransac(matches, cfg, true);
    let ff = ransac(matches, cfg, false);
    let (sh, sf) = (
        fh.as_ref().map_or(0.0, |f| f.score),
        ff.as_ref().map_or(0.0, |f| f.score),
    );
    if sh + sf <= 0.0 {
        return Err(TwoViewRejection::new(SfmError::NoModel, None));
    }
    let use_h = sh / (sh + sf) > cfg.homography_ratio;
    let (fit, model) = if use_h {
        (fh.unwrap(), TwoViewModel::Homography)
    } else {
        (ff.unwrap(), TwoViewModel::Fundamental)
    };
    let n_inliers = fit.inliers.iter().filter(|&&b| b).count();
    let inliers = fit.inliers.clone();
    let reject = |reason| Err(TwoViewRejection::new(reason, Some(inliers.clone())));
    if n_inliers < MIN_MATCHES {
        return reject(SfmError::InsufficientData {
            needed: MIN_MATCHES,
            got: n_inliers,
        });
    }
    let (min_parallax, margin, good_fraction) = if relaxed {
        (cfg.relaxed_parallax_deg, cfg.relaxed_margin, cfg.relaxed_good_fraction)
    } else {
        (cfg.strict_parallax_deg, cfg.strict_margin, cfg.strict_good_fraction)
    };
    let solutions = match model {
        TwoViewModel::Homography => decompose_h(&fit.model, cam),
        TwoViewModel::Fundamental => decompose_f(&fit.model, cam),
    };
    let Some(solutions) = solutions else {
        // Equal singular values: the homography is a pure rotation.
        return reject(SfmError::LowParallax {
            degrees: 0.0,
            required: min_parallax,
        });
    };
    let th2 = cfg.threshold_px * cfg.threshold_px;
    let mut checks: Vec<(usize, Check)> = solutions
        .iter()
        .enumerate()
        .map(|(i, (r, t))| (i, check_rt(r, t, matches, &fit.inliers, cam, th2)))
        .collect();
    // Stable: equal counts keep decomposition order.
    checks.sort_by(|a, b| b.1.good.cmp(&a.1.good));
    let best_good = checks[0].1.good;
    if best_good == 0 || (best_good as f64) < good_fraction * n_inliers as f64 {
        return reject(SfmError::Cheirality);
    }
    let second = checks.get(1).map_or(0, |c| c.1.good);
    let mut out = Vec::new();
    for (k, (i, check)) in checks.into_iter().enumerate() {
        // The winner plus every solution close enough to make it ambiguous.
        if k > 0 && (best_good as f64) >= margin * check.good as f64 {
            break;
        }
        let triangulated = check.points.iter().flatten().count();
        if check.parallax_deg < min_parallax || triangulated < MIN_MATCHES {
            if k == 0 {
                return reject(SfmError::LowParallax {
                    degrees: check.parallax_deg,
                    required: min_parallax,
                });
            }
            continue;
        }
        let (r, t) = solutions[i];
        out.push(TwoViewResult {
            pose: Pose::new(UnitQuaternion::from_matrix(&r), t),
            inliers: fit.inliers.clone(),
            points: check.points,
            model,
            parallax_deg: check.parallax_deg,
        });
    }
    if out.len() > 1 {
        return Err(TwoViewRejection {
            reason: SfmError::Ambiguous { best: best_good, second },
            inliers: Some(inliers),
            candidates: out,
        });
    }
    Ok(out.pop().expect("winner passed every gate"))
}
