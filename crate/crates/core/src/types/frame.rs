use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lie::Pose;
use crate::vision::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    Tiny,
    Mci,
    Keyframe,
}

/// Image location of a feature, optionally bound to a feature track.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub track_id: Option<u64>,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("keypoint ({x}, {y}) lies outside the {width}x{height} image")]
    KeypointOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("keyframe without a pose")]
    KeyframeWithoutPose,
}

/// A reconstructed event image together with its timestamp, keypoints and
/// (once tracked) camera pose. `pose` is camera-from-world.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: u64,
    pub t_ref: f64,
    pub image: ImageBuffer,
    pub keypoints: Vec<Keypoint>,
    pub pose: Option<Pose>,
    pub kind: FrameKind,
}

impl Frame {
    pub fn new(
        id: u64,
        t_ref: f64,
        image: ImageBuffer,
        keypoints: Vec<Keypoint>,
        pose: Option<Pose>,
        kind: FrameKind,
    ) -> Result<Self, FrameError> {
        let (w, h) = (image.width(), image.height());
        if let Some(k) = keypoints
            .iter()
            .find(|k| !(k.x >= 0.0 && k.y >= 0.0 && k.x < w as f64 && k.y < h as f64))
        {
            return Err(FrameError::KeypointOutOfBounds {
                x: k.x,
                y: k.y,
                width: w,
                height: h,
            });
        }
        if kind == FrameKind::Keyframe && pose.is_none() {
            return Err(FrameError::KeyframeWithoutPose);
        }
        Ok(Self {
            id,
            t_ref,
            image,
            keypoints,
            pose,
            kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_bounds_keypoints() {
        let img = ImageBuffer::zeros(10, 10);
        let kp = Keypoint { x: 10.0, y: 2.0, track_id: None };
        assert!(Frame::new(0, 0.0, img.clone(), vec![kp], None, FrameKind::Mci).is_err());
        assert!(Frame::new(0, 0.0, img, vec![], None, FrameKind::Keyframe).is_err());
    }
}
