//! Shared value types: events, camera models, Lie groups and frames.

pub mod camera;
pub mod event;
pub mod frame;
pub mod lie;

pub use camera::{rectify_events, CameraError, CameraModel, Distortion, RectificationMap};
pub use event::{time_span, Event, Polarity};
pub use frame::{Frame, FrameError, FrameKind, Keypoint};
pub use lie::{
    lie_exp, lie_log, GroupElement, LieError, PlanarGroup, PlanarTwist, Pose, Similarity2,
    SpatialTwist, Twist,
};
