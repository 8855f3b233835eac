use crate::cloud::PointCloud;
use crate::se3::{Pose, TangentCovariance};

/// One scan with its front-end odometry estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub session: u32,
    pub index: u32,
    /// Seconds.
    pub timestamp: f64,
    /// Odometry pose in the session frame.
    pub pose: Pose,
    /// Right-perturbation covariance of `pose`.
    pub covariance: TangentCovariance,
    pub keyframe: bool,
    /// Points in the body frame.
    pub cloud: PointCloud,
}

/// A mapping session: frames in a local odometry frame plus `init`, the
/// estimate of that frame in the shared map frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: u32,
    pub init: Pose,
    pub frames: Vec<Frame>,
}

impl Session {
    pub fn new(id: u32, init: Pose) -> Self {
        Self { id, init, frames: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame pose in the map frame, `init · pose`.
    pub fn world_pose(&self, frame: &Frame) -> Pose {
        self.init * frame.pose
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.keyframe)
    }

    pub fn has_keyframes(&self) -> bool {
        self.frames.iter().any(|f| f.keyframe)
    }
}
