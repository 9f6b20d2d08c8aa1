//! Competing motion hypotheses for one reconstruction window.

use log::debug;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::motion::{estimate_mean_depth, fit_2d_motion, DepthConfig, MotionFitConfig};
use super::warp::{warp_2d_with, warp_3d_with};
use super::MciError;
use crate::sfm::{local_bundle_adjustment, BaConfig, BaObservation, BaProblem};
use crate::types::{CameraModel, Event, PlanarGroup, PlanarTwist, Pose, Similarity2, SpatialTwist};
use crate::vision::{local_std_sharpness, normalize_min_max, splat_points, ImageBuffer, SplatConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    /// Two-view structure refined by BA, SE3 warp at the median depth.
    H1,
    /// Planar motion model fitted to feature tracks.
    H2,
    /// Pose prior with an estimated mean scene depth.
    H3,
    /// Plain histogram.
    H4,
}

impl Hypothesis {
    /// Higher wins ties.
    fn precedence(self) -> u8 {
        match self {
            Hypothesis::H1 => 3,
            Hypothesis::H3 => 2,
            Hypothesis::H2 => 1,
            Hypothesis::H4 => 0,
        }
    }
}

/// Pixel matches between the reference tiny frame and the latest one.
#[derive(Clone, Debug, Default)]
pub struct TrackSet {
    pub matches: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub dt: f64,
}

#[derive(Clone, Debug)]
pub struct TwoViewPrior {
    /// Maps points from the earlier view into the later one.
    pub relative: Pose,
    /// Triangulated points in the earlier view.
    pub points: Vec<Vector3<f64>>,
    /// Pixel pairs `(earlier, later)` for each point.
    pub observations: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub dt: f64,
}

impl TwoViewPrior {
    pub fn median_depth(&self) -> Option<f64> {
        median_z(&self.points)
    }
}

#[derive(Clone, Debug)]
pub struct PosePrior {
    /// Predicted transform from the window start to its end.
    pub relative: Pose,
    pub dt: f64,
    /// Map depth to fall back on when the tracks cannot constrain it.
    pub scene_depth: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct MotionPriors {
    /// Last fitted planar model, used to seed the fit.
    pub model_2d: Option<PlanarTwist>,
    pub tracks: Option<TrackSet>,
    pub two_view: Option<TwoViewPrior>,
    pub pose_prior: Option<PosePrior>,
}

#[derive(Clone, Debug, Default)]
pub struct RefinedPriors {
    pub twist_2d: Option<PlanarTwist>,
    pub twist_3d: Option<SpatialTwist>,
    pub depth: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MciCandidate {
    /// Raw (unnormalized) histogram.
    pub image: ImageBuffer,
    pub hypothesis: Hypothesis,
    pub score: f64,
    pub refined: RefinedPriors,
}

impl MciCandidate {
    pub fn normalized(&self) -> ImageBuffer {
        normalize_min_max(&self.image)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MciConfig {
    pub splat: SplatConfig,
    pub patch: usize,
    pub group: PlanarGroup,
    pub ba_enabled: bool,
    pub ba_iterations: usize,
    pub enable_h1: bool,
    pub enable_h2: bool,
    pub enable_h3: bool,
    pub concurrent: bool,
    pub motion: MotionFitConfig,
    pub depth: DepthConfig,
}

impl Default for MciConfig {
    fn default() -> Self {
        Self {
            splat: SplatConfig::default(),
            patch: 16,
            group: PlanarGroup::Sim2,
            ba_enabled: true,
            ba_iterations: 10,
            enable_h1: true,
            enable_h2: true,
            enable_h3: true,
            concurrent: true,
            motion: MotionFitConfig::default(),
            depth: DepthConfig::default(),
        }
    }
}

fn median_z(points: &[Vector3<f64>]) -> Option<f64> {
    let mut z: Vec<f64> = points.iter().map(|p| p.z).filter(|z| *z > 0.0 && z.is_finite()).collect();
    if z.is_empty() {
        return None;
    }
    z.sort_by(f64::total_cmp);
    Some(z[(z.len() - 1) / 2])
}

fn speed(relative: &Pose, dt: f64) -> Option<SpatialTwist> {
    if !(dt > 0.0) {
        return None;
    }
    relative.log().ok().map(|t| t.scaled(1.0 / dt)).filter(SpatialTwist::is_finite)
}

struct Window<'a> {
    events: &'a [Event],
    t_ref: f64,
    cam: &'a CameraModel,
    cfg: &'a MciConfig,
}

impl Window<'_> {
    fn finish(&self, hypothesis: Hypothesis, image: ImageBuffer, refined: RefinedPriors) -> MciCandidate {
        let score = local_std_sharpness(&image, self.cfg.patch).unwrap_or(0.0).max(0.0);
        MciCandidate {
            image,
            hypothesis,
            score,
            refined,
        }
    }

    fn size(&self) -> (usize, usize) {
        (self.cam.width as usize, self.cam.height as usize)
    }

    fn plain(&self) -> MciCandidate {
        let (w, h) = self.size();
        let img = splat_points(
            self.events.iter().map(|e| (e.x as f64, e.y as f64, self.cfg.splat.weight(e))),
            &self.cfg.splat,
            w,
            h,
        );
        self.finish(Hypothesis::H4, img, RefinedPriors::default())
    }

    fn planar(&self, twist: PlanarTwist) -> ImageBuffer {
        let (w, h) = self.size();
        splat_points(
            self.events.iter().map(|e| {
                let s = Similarity2::exp(&twist, self.t_ref - e.t);
                let p = warp_2d_with(&Vector2::new(e.x as f64, e.y as f64), &s, self.cam);
                (p.x, p.y, self.cfg.splat.weight(e))
            }),
            &self.cfg.splat,
            w,
            h,
        )
    }

    fn spatial(&self, twist: &SpatialTwist, depth: f64) -> ImageBuffer {
        let (w, h) = self.size();
        splat_points(
            self.events.iter().filter_map(|e| {
                let t = Pose::exp(twist, self.t_ref - e.t);
                let p = warp_3d_with(&Vector2::new(e.x as f64, e.y as f64), &t, depth, self.cam)?;
                Some((p.x, p.y, self.cfg.splat.weight(e)))
            }),
            &self.cfg.splat,
            w,
            h,
        )
    }

    fn h1(&self, prior: &TwoViewPrior) -> Option<MciCandidate> {
        let mut relative = prior.relative;
        let mut points = prior.points.clone();
        if self.cfg.ba_enabled && prior.points.len() == prior.observations.len() && !points.is_empty() {
            let mut problem = BaProblem {
                poses: vec![Pose::identity(), relative],
                fixed: vec![true, false],
                points: points.clone(),
                observations: prior
                    .observations
                    .iter()
                    .enumerate()
                    .flat_map(|(i, (a, b))| {
                        [
                            BaObservation { pose: 0, point: i, pixel: *a, weight: 1.0 },
                            BaObservation { pose: 1, point: i, pixel: *b, weight: 1.0 },
                        ]
                    })
                    .collect(),
            };
            let cfg = BaConfig {
                max_iterations: self.cfg.ba_iterations,
                ..BaConfig::default()
            };
            match local_bundle_adjustment(&mut problem, self.cam, &cfg) {
                Ok(_) => {
                    relative = problem.poses[1];
                    points = problem.points;
                }
                Err(e) => debug!("H1 bundle adjustment skipped: {e}"),
            }
        }
        let depth = median_z(&points)?;
        let twist = speed(&relative, prior.dt)?;
        let img = self.spatial(&twist, depth);
        Some(self.finish(
            Hypothesis::H1,
            img,
            RefinedPriors {
                twist_3d: Some(twist),
                depth: Some(depth),
                ..Default::default()
            },
        ))
    }

    fn h2(&self, tracks: &TrackSet, seed: Option<&PlanarTwist>) -> Option<MciCandidate> {
        let twist = match fit_2d_motion(&tracks.matches, self.cam, tracks.dt, self.cfg.group, seed, &self.cfg.motion) {
            Ok(fit) => fit.twist,
            Err(e) => {
                debug!("H2 fit failed: {e}");
                *seed?
            }
        };
        let img = self.planar(twist);
        Some(self.finish(
            Hypothesis::H2,
            img,
            RefinedPriors {
                twist_2d: Some(twist),
                ..Default::default()
            },
        ))
    }

    fn h3(&self, prior: &PosePrior, tracks: Option<&TrackSet>) -> Option<MciCandidate> {
        let twist = speed(&prior.relative, prior.dt)?;
        // The tracks span their own interval; rescale the prior onto it.
        let estimated = tracks.and_then(|t| {
            let rel = Pose::exp(&twist, t.dt);
            estimate_mean_depth(&t.matches, &rel, self.cam, &self.cfg.depth)
                .map_err(|e| debug!("H3 depth estimate failed: {e}"))
                .ok()
        });
        let depth = estimated.or(prior.scene_depth).filter(|d| *d > 0.0)?;
        let img = self.spatial(&twist, depth);
        Some(self.finish(
            Hypothesis::H3,
            img,
            RefinedPriors {
                twist_3d: Some(twist),
                depth: Some(depth),
                ..Default::default()
            },
        ))
    }
}

/// Builds one candidate per applicable hypothesis. Hypotheses whose priors
/// turn out unusable are dropped; the plain histogram is always present.
/// Candidates are returned in the order H1, H2, H3, H4.
pub fn reconstruct_hypotheses(
    events: &[Event],
    priors: &MotionPriors,
    cam: &CameraModel,
    cfg: &MciConfig,
) -> Result<Vec<MciCandidate>, MciError> {
    let last = events.last().ok_or(MciError::EmptyWindow)?;
    let win = Window {
        events,
        t_ref: last.t,
        cam,
        cfg,
    };
    let tracks = priors.tracks.as_ref().filter(|t| !t.matches.is_empty());
    let run_h1 = || priors.two_view.as_ref().filter(|_| cfg.enable_h1).and_then(|p| win.h1(p));
    let run_h2 = || tracks.filter(|_| cfg.enable_h2).and_then(|t| win.h2(t, priors.model_2d.as_ref()));
    let run_h3 = || priors.pose_prior.as_ref().filter(|_| cfg.enable_h3).and_then(|p| win.h3(p, tracks));
    let (h1, h2, h3, h4) = if cfg.concurrent {
        std::thread::scope(|s| {
            let a = s.spawn(run_h1);
            let b = s.spawn(run_h2);
            let c = s.spawn(run_h3);
            let d = win.plain();
            (a.join().unwrap(), b.join().unwrap(), c.join().unwrap(), d)
        })
    } else {
        (run_h1(), run_h2(), run_h3(), win.plain())
    };
    Ok([h1, h2, h3, Some(h4)].into_iter().flatten().collect())
}

/// Highest score; exact ties go to H1, then H3, H2, H4.
pub fn select_best(mut candidates: Vec<MciCandidate>) -> Result<MciCandidate, MciError> {
    let i = best_index(&candidates).ok_or(MciError::NoCandidates)?;
    Ok(candidates.swap_remove(i))
}

/// Index of the candidate [`select_best`] would return.
pub fn best_index(candidates: &[MciCandidate]) -> Option<usize> {
    (0..candidates.len()).max_by(|&a, &b| {
        let (a, b) = (&candidates[a], &candidates[b]);
        a.score
            .total_cmp(&b.score)
            .then(a.hypothesis.precedence().cmp(&b.hypothesis.precedence()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Polarity;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::pinhole(240, 180, 200.0, 200.0, 120.0, 90.0)
    }

    fn candidate(h: Hypothesis, score: f64) -> MciCandidate {
        MciCandidate {
            image: ImageBuffer::zeros(4, 4),
            hypothesis: h,
            score,
            refined: RefinedPriors::default(),
        }
    }

    /// Events fired by fixed edge points while the image moves with the
    /// planar model `s(t) = Exp(twist * t)` over `[0, span]`.
    fn moving_edges(twist: &PlanarTwist, span: f64, seed: u64) -> Vec<Event> {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<Vector2<f64>> = (0..150)
            .map(|_| Vector2::new(rng.random_range(40.0..200.0), rng.random_range(30.0..150.0)))
            .collect();
        let mut ev: Vec<Event> = (0..8000)
            .map(|_| {
                let a = anchors[rng.random_range(0..anchors.len())];
                let t = rng.random_range(0.0..span);
                let p = warp_2d_with(&a, &Similarity2::exp(twist, t), &c);
                Event::new(t, p.x as f32, p.y as f32, Polarity::Positive)
            })
            .collect();
        ev.sort_by(|a, b| a.t.total_cmp(&b.t));
        ev
    }

    #[test]
    fn no_priors_gives_plain_histogram_only() {
        let ev = moving_edges(&PlanarTwist::se2(0.0, 0.0, 0.0), 0.01, 1);
        let c = reconstruct_hypotheses(&ev, &MotionPriors::default(), &cam(), &MciConfig::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].hypothesis, Hypothesis::H4);
        assert!(c[0].score >= 0.0);
    }

    #[test]
    fn empty_window_is_an_error() {
        let r = reconstruct_hypotheses(&[], &MotionPriors::default(), &cam(), &MciConfig::default());
        assert_eq!(r.unwrap_err(), MciError::EmptyWindow);
    }

    fn tracks_for(twist: &PlanarTwist, dt: f64) -> TrackSet {
        let c = cam();
        let s = Similarity2::exp(twist, dt);
        let matches = (0..30)
            .map(|i| {
                let a = Vector2::new(30.0 + 6.0 * i as f64, 40.0 + 3.0 * i as f64);
                (a, warp_2d_with(&a, &s, &c))
            })
            .collect();
        TrackSet { matches, dt }
    }

    #[test]
    fn planar_hypothesis_sharpens_rotation() {
        // 0.08 rad over the window: about 8 px at 100 px from the center.
        let span = 0.1;
        let twist = PlanarTwist::se2(0.0, 0.0, 0.8);
        let ev = moving_edges(&twist, span, 2);
        let priors = MotionPriors {
            tracks: Some(tracks_for(&twist, 0.05)),
            ..Default::default()
        };
        let c = reconstruct_hypotheses(&ev, &priors, &cam(), &MciConfig::default()).unwrap();
        assert_eq!(c.len(), 2);
        let h2 = c.iter().find(|c| c.hypothesis == Hypothesis::H2).unwrap();
        let h4 = c.iter().find(|c| c.hypothesis == Hypothesis::H4).unwrap();
        assert!(h2.score > h4.score, "{} vs {}", h2.score, h4.score);
        assert_eq!(select_best(c).unwrap().hypothesis, Hypothesis::H2);
    }

    #[test]
    fn all_hypotheses_present_when_priors_are() {
        let twist = PlanarTwist::se2(0.3, 0.0, 0.0);
        let ev = moving_edges(&twist, 0.05, 3);
        let rel = Pose::from_translation(Vector3::new(-0.05, 0.0, 0.0));
        let c = cam();
        let points: Vec<Vector3<f64>> = (0..20)
            .map(|i| Vector3::new(-0.5 + 0.05 * i as f64, 0.1 * (i % 5) as f64 - 0.2, 3.0))
            .collect();
        let observations = points
            .iter()
            .map(|p| {
                (
                    crate::sfm::project_pinhole(&c, p).unwrap(),
                    crate::sfm::project_pinhole(&c, &rel.transform_point(p)).unwrap(),
                )
            })
            .collect::<Vec<_>>();
        let priors = MotionPriors {
            model_2d: None,
            tracks: Some(TrackSet {
                matches: observations.clone(),
                dt: 0.05,
            }),
            two_view: Some(TwoViewPrior {
                relative: rel,
                points,
                observations,
                dt: 0.05,
            }),
            pose_prior: Some(PosePrior {
                relative: rel,
                dt: 0.05,
                scene_depth: Some(3.0),
            }),
        };
        for concurrent in [true, false] {
            let cfg = MciConfig {
                concurrent,
                ..Default::default()
            };
            let out = reconstruct_hypotheses(&ev, &priors, &c, &cfg).unwrap();
            let kinds: Vec<_> = out.iter().map(|c| c.hypothesis).collect();
            assert_eq!(kinds, vec![Hypothesis::H1, Hypothesis::H2, Hypothesis::H3, Hypothesis::H4]);
            let d = out[2].refined.depth.unwrap();
            assert!((d - 3.0).abs() < 0.05, "{d}");
        }
    }

    #[test]
    fn zero_twist_reproduces_plain_histogram() {
        let ev = moving_edges(&PlanarTwist::se2(0.5, 0.2, 0.1), 0.05, 4);
        let cfg = MciConfig::default();
        let c = cam();
        let win = Window {
            events: &ev,
            t_ref: ev.last().unwrap().t,
            cam: &c,
            cfg: &cfg,
        };
        let plain = win.plain().image;
        assert_eq!(win.planar(PlanarTwist::zero(PlanarGroup::Sim2)).data(), plain.data());
        assert_eq!(win.spatial(&SpatialTwist::zero(), 2.0).data(), plain.data());
    }

    #[test]
    fn selection_rules() {
        let one = select_best(vec![candidate(Hypothesis::H4, 1.0)]).unwrap();
        assert_eq!(one.hypothesis, Hypothesis::H4);
        let c = vec![candidate(Hypothesis::H2, 5.0), candidate(Hypothesis::H4, 3.0)];
        assert_eq!(select_best(c).unwrap().hypothesis, Hypothesis::H2);
        let c = vec![candidate(Hypothesis::H4, 3.0), candidate(Hypothesis::H2, 3.0)];
        assert_eq!(select_best(c).unwrap().hypothesis, Hypothesis::H2);
        let c = vec![
            candidate(Hypothesis::H2, 3.0),
            candidate(Hypothesis::H3, 3.0),
            candidate(Hypothesis::H1, 3.0),
        ];
        assert_eq!(select_best(c).unwrap().hypothesis, Hypothesis::H1);
        let c = vec![candidate(Hypothesis::H2, 3.0), candidate(Hypothesis::H3, 3.0)];
        assert_eq!(select_best(c).unwrap().hypothesis, Hypothesis::H3);
        assert_eq!(select_best(vec![]).unwrap_err(), MciError::NoCandidates);
    }

    #[test]
    fn pose_prior_speed_round_trips() {
        let rel = Pose::new(UnitQuaternion::from_euler_angles(0.02, 0.01, -0.03), Vector3::new(0.1, 0.0, 0.02));
        let tw = speed(&rel, 0.05).unwrap();
        let back = Pose::exp(&tw, 0.05);
        assert!((back.translation - rel.translation).norm() < 1e-12);
        assert!(back.rotation.angle_to(&rel.rotation) < 1e-12);
        assert!(speed(&rel, 0.0).is_none());
    }
}
