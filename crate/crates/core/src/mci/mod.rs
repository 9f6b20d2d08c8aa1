//! Motion-compensated image reconstruction from event windows.

pub mod hypotheses;
pub mod motion;
pub mod warp;

use thiserror::Error;

pub use hypotheses::{
    best_index, reconstruct_hypotheses, select_best, Hypothesis, MciCandidate, MciConfig, MotionPriors,
    PosePrior, RefinedPriors, TrackSet, TwoViewPrior,
};
pub use motion::{estimate_mean_depth, fit_2d_motion, DepthConfig, MotionFit, MotionFitConfig};
pub use warp::{warp_2d, warp_2d_with, warp_3d, warp_3d_with};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MciError {
    #[error("event window is empty")]
    EmptyWindow,
    #[error("need at least {needed} matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    #[error("invalid time interval {0}")]
    InvalidInterval(f64),
    #[error("optimization did not converge")]
    NonConvergent,
    #[error("depth is unobservable without translation")]
    Unobservable,
    #[error("depth estimate is poorly conditioned")]
    Unreliable,
    #[error("no candidates to select from")]
    NoCandidates,
}
