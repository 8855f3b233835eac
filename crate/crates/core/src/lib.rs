//! Multi-session LiDAR mapping back end.
//!
//! Sessions are thinned to keyframes by a voxel-Gaussian Wasserstein gate,
//! registered against an existing map with point-to-plane ICP, and merged in a
//! pose graph whose loop factors carry their registration covariance.
//!
//! ```
//! use msmap::se3::{transform_covariance, Pose, TangentCovariance};
//! use nalgebra::Vector3;
//!
//! let t = Pose::from_translation(Vector3::new(2.0, 0.0, 0.0));
//! let c = transform_covariance(&TangentCovariance::diagonal(1e-4, 1e-2), &t);
//! // A translation couples rotation uncertainty into translation.
//! assert!(c.trace() > TangentCovariance::diagonal(1e-4, 1e-2).trace());
//! ```
//!
//! The `book/` directory walks through each module; its listings run as
//! doctests of this crate.

pub mod cli;
pub mod cloud;
pub mod gmm;
pub mod graph;
pub mod keyframe;
pub mod metrics;
pub mod pipeline;
pub mod registration;
pub mod se3;
pub mod session;
pub mod sim;
pub mod spatial;
pub mod store;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/poses.md")]
    mod poses {}
    #[doc = include_str!("../../../book/src/voxel-maps.md")]
    mod voxel_maps {}
    #[doc = include_str!("../../../book/src/keyframes.md")]
    mod keyframes {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/pose-graphs.md")]
    mod pose_graphs {}
    #[doc = include_str!("../../../book/src/merging.md")]
    mod merging {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
