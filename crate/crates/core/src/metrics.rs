//! Trajectory and map metrics: ATE, accuracy (AC), Chamfer distance and mean
//! map entropy (MME).

use std::f64::consts::{E, PI};

use nalgebra::{Matrix3, Vector3};

use crate::cloud::PointCloud;
use crate::se3::{Pose, Rotation};
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("timestamps must be strictly increasing (index {0})")]
    Timestamps(usize),
    #[error("need at least 2 associated poses, found {0}")]
    Association(usize),
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
    #[error("no inlier pairs (inlier fraction 0)")]
    NoInliers,
    #[error("no point has a valid entropy neighbourhood")]
    NoValidPoints,
    #[error("inlier threshold {inlier} exceeds knn distance {knn}")]
    Config { inlier: f64, knn: f64 },
}

/// Time-stamped poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, MetricError> {
        if let Some(i) = samples.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(MetricError::Timestamps(i + 1));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn transformed(&self, t: &Pose) -> Self {
        Self { samples: self.samples.iter().map(|(s, p)| (*s, *t * *p)).collect() }
    }

    /// Index of the sample closest in time to `t`, if within `tol`.
    pub fn nearest(&self, t: f64, tol: f64) -> Option<usize> {
        let i = self.samples.partition_point(|(s, _)| *s < t);
        let candidates = [i.checked_sub(1), (i < self.samples.len()).then_some(i)];
        candidates
            .into_iter()
            .flatten()
            .map(|k| (k, (self.samples[k].0 - t).abs()))
            .filter(|(_, d)| *d <= tol)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub knn_distance: f64,
    pub inlier_threshold: f64,
    pub mme_radius: f64,
    pub mme_min_neighbors: usize,
    /// Neighbourhoods with `|Σ|` below this (m⁶) are excluded from MME.
    pub mme_det_floor: f64,
    /// Timestamp association tolerance, seconds.
    pub association_tolerance: f64,
    /// Rigid alignment before ATE.
    pub align: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::indoor()
    }
}

impl MetricConfig {
    pub fn indoor() -> Self {
        Self {
            knn_distance: 1.0,
            inlier_threshold: 0.5,
            mme_radius: 0.1,
            mme_min_neighbors: 10,
            mme_det_floor: 1e-18,
            association_tolerance: 0.02,
            align: true,
        }
    }

    pub fn outdoor() -> Self {
        Self { mme_radius: 0.2, ..Self::indoor() }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.inlier_threshold > self.knn_distance {
            return Err(MetricError::Config { inlier: self.inlier_threshold, knn: self.knn_distance });
        }
        Ok(())
    }
}

/// Rigid transform `T` minimizing `Σ ‖dst_i − T·src_i‖²` (no scale).
pub fn umeyama_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cross += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_unchecked(u * d * v_t);
    let t = mu_d - r * mu_s;
    Pose::new(r, t)
}

/// Associated `(estimate, truth)` positions by nearest timestamp.
pub fn associate(estimate: &Trajectory, truth: &Trajectory, tol: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    estimate
        .samples()
        .iter()
        .filter_map(|(t, p)| truth.nearest(*t, tol).map(|k| (p.translation, truth.samples()[k].1.translation)))
        .collect()
}

/// Positional RMSE after optional rigid alignment.
pub fn ate(estimate: &Trajectory, truth: &Trajectory, cfg: &MetricConfig) -> Result<f64, MetricError> {
    let pairs = associate(estimate, truth, cfg.association_tolerance);
    if pairs.len() < 2 {
        return Err(MetricError::Association(pairs.len()));
    }
    let (est, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let align = if cfg.align { umeyama_rigid(&est, &gt) } else { Pose::identity() };
    let sse: f64 = est.iter().zip(&gt).map(|(e, g)| (align.transform_point(e) - g).norm_squared()).sum();
    Ok((sse / est.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// RMSE over inlier pairs, meters.
    pub ac: f64,
    pub inlier_fraction: f64,
}

/// Distance from each estimate point to its nearest truth point, `None` when
/// beyond the knn search distance.
pub fn point_errors(estimate: &PointCloud, truth: &PointCloud, cfg: &MetricConfig) -> Vec<Option<f64>> {
    let tree = KdTree::build(&truth.points);
    estimate.points.iter().map(|p| tree.nearest_within(p, cfg.knn_distance).map(|(_, d2)| d2.sqrt())).collect()
}

pub fn accuracy(estimate: &PointCloud, truth: &PointCloud, cfg: &MetricConfig) -> Result<Accuracy, MetricError> {
    cfg.validate()?;
    if estimate.is_empty() {
        return Err(MetricError::EmptyCloud("estimate"));
    }
    if truth.is_empty() {
        return Err(MetricError::EmptyCloud("truth"));
    }
    let inliers: Vec<f64> =
        point_errors(estimate, truth, cfg).into_iter().flatten().filter(|d| *d < cfg.inlier_threshold).collect();
    if inliers.is_empty() {
        return Err(MetricError::NoInliers);
    }
    let ac = (inliers.iter().map(|d| d * d).sum::<f64>() / inliers.len() as f64).sqrt();
    Ok(Accuracy { ac, inlier_fraction: inliers.len() as f64 / estimate.len() as f64 })
}

fn mean_nearest(from: &[Vector3<f64>], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest(p).map_or(0.0, |(_, d2)| d2.sqrt())).sum::<f64>() / from.len() as f64
}

/// `mean_P min_Q ‖p − q‖ + mean_Q min_P ‖q − p‖`
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64, MetricError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricError::EmptyCloud(if p.is_empty() { "first" } else { "second" }));
    }
    let (tp, tq) = (KdTree::build(&p.points), KdTree::build(&q.points));
    Ok(mean_nearest(&p.points, &tq) + mean_nearest(&q.points, &tp))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub mme: f64,
    pub valid_fraction: f64,
}

/// Differential entropy `½ ln |2πe Σ|` of each point's radius neighbourhood,
/// `None` where the neighbourhood is too small or degenerate.
pub fn point_entropies(cloud: &PointCloud, cfg: &MetricConfig) -> Vec<Option<f64>> {
    let tree = KdTree::build(&cloud.points);
    let c = 2.0 * PI * E;
    cloud
        .points
        .iter()
        .map(|p| {
            let idx = tree.within_radius(p, cfg.mme_radius);
            if idx.len() < cfg.mme_min_neighbors || idx.len() < 2 {
                return None;
            }
            let n = idx.len() as f64;
            let mu = idx.iter().map(|&i| cloud.points[i]).sum::<Vector3<f64>>() / n;
            let mut s = Matrix3::zeros();
            for &i in &idx {
                let d = cloud.points[i] - mu;
                s += d * d.transpose();
            }
            let det = (s / (n - 1.0)).determinant();
            (det >= cfg.mme_det_floor).then(|| 0.5 * (c * c * c * det).ln())
        })
        .collect()
}

pub fn mme(cloud: &PointCloud, cfg: &MetricConfig) -> Result<Entropy, MetricError> {
    if cloud.is_empty() {
        return Err(MetricError::EmptyCloud("map"));
    }
    let h: Vec<f64> = point_entropies(cloud, cfg).into_iter().flatten().collect();
    if h.is_empty() {
        return Err(MetricError::NoValidPoints);
    }
    Ok(Entropy { mme: h.iter().sum::<f64>() / h.len() as f64, valid_fraction: h.len() as f64 / cloud.len() as f64 })
}
