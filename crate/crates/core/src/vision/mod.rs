//! Image primitives: event splatting, pyramids, FAST, KLT, sharpness and
//! global shift search.

pub mod fast;
pub mod image;
pub mod klt;
pub mod pyramid;
pub mod sharpness;
pub mod shift;
pub mod splat;

use thiserror::Error;

pub use fast::{detect_fast, Corner, FastConfig};
pub use image::ImageBuffer;
pub use klt::{klt_track, klt_track_with_guesses, KltConfig, TrackResult, TrackStatus};
pub use pyramid::{build_pyramid, Pyramid};
pub use sharpness::local_std_sharpness;
pub use shift::estimate_shift;
pub use splat::{normalize_min_max, splat_events, splat_points, PolarityMode, SplatConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("image {width}x{height} is smaller than the required {required} pixels per side")]
    ImageTooSmall {
        width: usize,
        height: usize,
        required: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
