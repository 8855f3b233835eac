use std::collections::HashSet;

use nalgebra::Vector3;

use crate::gmm::voxel_key;

use crate::se3::Pose;

/// Point cloud in meters, with optional per-point timestamps in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub timestamps: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, timestamps: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| pose.transform_point(p)).collect(), timestamps: self.timestamps.clone() }
    }

    pub fn extend_transformed(&mut self, other: &PointCloud, pose: &Pose) {
        self.points.extend(other.points.iter().map(|p| pose.transform_point(p)));
        self.timestamps = None;
    }
}

/// Keeps the first point falling in each voxel of edge `voxel_size`, in input order.
pub fn voxel_downsample(points: &[Vector3<f64>], voxel_size: f64) -> Vec<Vector3<f64>> {
    if !(voxel_size > 0.0) {
        return points.to_vec();
    }
    let mut seen = HashSet::new();
    points.iter().filter(|p| seen.insert(voxel_key(p, voxel_size))).copied().collect()
}

impl From<Vec<Vector3<f64>>> for PointCloud {
    fn from(points: Vec<Vector3<f64>>) -> Self {
        Self::new(points)
    }
}
