//! Voxelized Gaussian-mixture map and the 2-Wasserstein distance between its
//! components.
//!
//! Each voxel keeps sufficient statistics `(n, Σp, Σppᵀ)` relative to its own
//! corner, so insertion is O(1) per point and the derived mean and sample
//! covariance (denominator `n − 1`) are exact at any time. The map as a whole
//! is the mixture of the per-voxel Gaussians.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GmmError {
    #[error("covariance is not symmetric (asymmetry {0:e} > 1e-6)")]
    Asymmetric(f64),
    #[error("voxel size must be positive, got {0}")]
    VoxelSize(f64),
    #[error("map radius must be positive, got {0}")]
    Radius(f64),
}

/// Integer voxel index `(⌊x/l⌋, ⌊y/l⌋, ⌊z/l⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub i64, pub i64, pub i64);

pub fn voxel_key(point: &Vector3<f64>, voxel_size: f64) -> VoxelKey {
    VoxelKey(
        (point.x / voxel_size).floor() as i64,
        (point.y / voxel_size).floor() as i64,
        (point.z / voxel_size).floor() as i64,
    )
}

impl VoxelKey {
    pub fn corner(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(self.0 as f64, self.1 as f64, self.2 as f64) * voxel_size
    }

    pub fn center(&self, voxel_size: f64) -> Vector3<f64> {
        self.corner(voxel_size) + Vector3::repeat(0.5 * voxel_size)
    }
}

/// Per-voxel sufficient statistics, relative to `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelStats {
    origin: Vector3<f64>,
    count: usize,
    sum: Vector3<f64>,
    sum_outer: Matrix3<f64>,
}

impl VoxelStats {
    pub fn new(origin: Vector3<f64>) -> Self {
        Self { origin, count: 0, sum: Vector3::zeros(), sum_outer: Matrix3::zeros() }
    }

    pub fn push(&mut self, p: &Vector3<f64>) {
        let d = p - self.origin;
        self.count += 1;
        self.sum += d;
        self.sum_outer += d * d.transpose();
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<Vector3<f64>> {
        (self.count > 0).then(|| self.origin + self.sum / self.count as f64)
    }

    /// Sample covariance with `n − 1` denominator, defined for `n ≥ 2`.
    pub fn covariance(&self) -> Option<Matrix3<f64>> {
        if self.count < 2 {
            return None;
        }
        let n = self.count as f64;
        let local_mean = self.sum / n;
        let c = (self.sum_outer - local_mean * self.sum.transpose()) / (n - 1.0);
        Some((c + c.transpose()) * 0.5)
    }
}

/// Pre-insertion statistics of the voxels a frame touched (the "before" map).
pub type Snapshot = BTreeMap<VoxelKey, VoxelStats>;

/// How per-voxel distances are averaged in [`map_w2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Unweighted,
    /// Weighted by the voxel's point count after the update.
    CountWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Options {
    /// Minimum point count in both maps for a voxel pair to be compared.
    pub min_count: usize,
    pub averaging: Averaging,
}

impl Default for W2Options {
    fn default() -> Self {
        Self { min_count: 6, averaging: Averaging::Unweighted }
    }
}

#[derive(Debug, Clone)]
pub struct VoxelMap {
    voxel_size: f64,
    radius: f64,
    voxels: HashMap<VoxelKey, VoxelStats>,
}

impl VoxelMap {
    pub fn new(voxel_size: f64, radius: f64) -> Result<Self, GmmError> {
        if !(voxel_size > 0.0) {
            return Err(GmmError::VoxelSize(voxel_size));
        }
        if !(radius > 0.0) {
            return Err(GmmError::Radius(radius));
        }
        Ok(Self { voxel_size, radius, voxels: HashMap::new() })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelStats> {
        self.voxels.get(key)
    }

    pub fn keys_sorted(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.voxels.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Adds map-frame points and returns the set of voxels whose statistics
    /// changed.
    pub fn insert_points(&mut self, points: &[Vector3<f64>]) -> BTreeSet<VoxelKey> {
        let mut touched = BTreeSet::new();
        for p in points {
            let key = voxel_key(p, self.voxel_size);
            let l = self.voxel_size;
            self.voxels.entry(key).or_insert_with(|| VoxelStats::new(key.corner(l))).push(p);
            touched.insert(key);
        }
        touched
    }

    /// Like [`insert_points`](Self::insert_points) but also returns the
    /// pre-insertion statistics of every touched voxel that already existed.
    pub fn insert_with_snapshot(&mut self, points: &[Vector3<f64>]) -> (BTreeSet<VoxelKey>, Snapshot) {
        let mut snapshot = Snapshot::new();
        for p in points {
            let key = voxel_key(p, self.voxel_size);
            if let Some(stats) = self.voxels.get(&key) {
                snapshot.entry(key).or_insert(*stats);
            }
        }
        let touched = self.insert_points(points);
        (touched, snapshot)
    }

    /// Removes voxels whose center is farther than the map radius from
    /// `center`. Returns the number removed.
    pub fn prune(&mut self, center: &Vector3<f64>) -> usize {
        let before = self.voxels.len();
        let (l, r) = (self.voxel_size, self.radius);
        self.voxels.retain(|k, _| (k.center(l) - center).norm() <= r);
        before - self.voxels.len()
    }

    /// One line per voxel in key order:
    /// `i j k n mu_x mu_y mu_z s_xx s_xy s_xz s_yy s_yz s_zz`.
    /// Covariance entries are zero for voxels with fewer than two points.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for key in self.keys_sorted() {
            let s = &self.voxels[&key];
            let mu = s.mean().unwrap_or_else(Vector3::zeros);
            let c = s.covariance().unwrap_or_else(Matrix3::zeros);
            let _ = writeln!(
                out,
                "{} {} {} {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                key.0, key.1, key.2, s.count, mu.x, mu.y, mu.z,
                c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]
            );
        }
        out
    }
}

/// PSD square root via symmetric eigendecomposition, eigenvalues clamped at 0.
fn sqrtm_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    let s = eig.eigenvectors * d * eig.eigenvectors.transpose();
    (s + s.transpose()) * 0.5
}

/// 2-Wasserstein distance between `N(mu1, sigma1)` and `N(mu2, sigma2)`:
///
/// `W₂² = ‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn gaussian_w2(
    mu1: &Vector3<f64>,
    sigma1: &Matrix3<f64>,
    mu2: &Vector3<f64>,
    sigma2: &Matrix3<f64>,
) -> Result<f64, GmmError> {
    for s in [sigma1, sigma2] {
        let asym = (s - s.transpose()).amax();
        if asym > 1e-6 {
            return Err(GmmError::Asymmetric(asym));
        }
    }
    // The trace term equals min over rotations Q of ‖Σ₁^½ − Σ₂^½ Q‖²_F, attained
    // at the polar factor of Σ₂^½ Σ₁^½; the sum of squares has no cancellation.
    let (root1, root2) = (sqrtm_psd(sigma1), sqrtm_psd(sigma2));
    let svd = (root2 * root1).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let trace_term = (root1 - root2 * u * v_t).norm_squared();
    Ok(((mu1 - mu2).norm_squared() + trace_term).sqrt())
}

/// Result of comparing a map before and after a frame was inserted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapDistance {
    /// Average W₂ over eligible voxel pairs, 0 when there are none.
    pub mean: f64,
    pub eligible: usize,
}

/// Average W₂ between the pre-insertion snapshot and the updated map over the
/// touched voxels. A pair is eligible only if the voxel already held
/// `min_count` points before the update; newly created voxels are skipped.
pub fn map_w2(before: &Snapshot, after: &VoxelMap, touched: &BTreeSet<VoxelKey>, opts: &W2Options) -> MapDistance {
    let mut total = 0.0;
    let mut weight = 0.0;
    let mut eligible = 0;
    for key in touched {
        let (Some(old), Some(new)) = (before.get(key), after.get(key)) else { continue };
        if old.count() < opts.min_count.max(2) || new.count() < opts.min_count.max(2) {
            continue;
        }
        let (Some(m1), Some(c1), Some(m2), Some(c2)) = (old.mean(), old.covariance(), new.mean(), new.covariance()) else {
            continue;
        };
        // both covariances come out of VoxelStats symmetrized, so this cannot fail
        let d = gaussian_w2(&m1, &c1, &m2, &c2).unwrap_or(0.0);
        let w = match opts.averaging {
            Averaging::Unweighted => 1.0,
            Averaging::CountWeighted => new.count() as f64,
        };
        total += w * d;
        weight += w;
        eligible += 1;
    }
    MapDistance { mean: if weight > 0.0 { total / weight } else { 0.0 }, eligible }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_key_floors() {
        assert_eq!(voxel_key(&Vector3::new(3.1, -0.2, 4.0), 2.0), VoxelKey(1, -1, 2));
        assert_eq!(voxel_key(&Vector3::zeros(), 0.37), VoxelKey(0, 0, 0));
        assert_eq!(voxel_key(&Vector3::repeat(-4.0), 2.0), VoxelKey(-2, -2, -2));
    }

    #[test]
    fn two_point_statistics() {
        let eps = 0.01;
        let mut map = VoxelMap::new(1.0, 10.0).unwrap();
        let touched = map.insert_points(&[Vector3::zeros(), Vector3::new(2.0 * eps, 0.0, 0.0)]);
        assert_eq!(touched.len(), 1);
        let s = map.get(&VoxelKey(0, 0, 0)).unwrap();
        assert_eq!(s.count(), 2);
        assert!((s.mean().unwrap() - Vector3::new(eps, 0.0, 0.0)).norm() < 1e-15);
        assert!((s.covariance().unwrap()[(0, 0)] - 2.0 * eps * eps).abs() < 1e-15);
        assert!(VoxelStats::new(Vector3::zeros()).covariance().is_none());
    }

    #[test]
    fn empty_insert_changes_nothing() {
        let mut map = VoxelMap::new(1.0, 10.0).unwrap();
        map.insert_points(&[Vector3::new(0.5, 0.5, 0.5)]);
        let dump = map.debug_dump();
        assert!(map.insert_points(&[]).is_empty());
        assert_eq!(map.debug_dump(), dump);
    }

    #[test]
    fn w2_closed_forms() {
        let i = Matrix3::identity();
        let mu = Vector3::new(1.0, 2.0, 3.0);
        assert!(gaussian_w2(&mu, &i, &mu, &i).unwrap().abs() < 1e-12);
        let d = gaussian_w2(&Vector3::zeros(), &i, &Vector3::new(3.0, 4.0, 0.0), &i).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        let d = gaussian_w2(&mu, &i, &mu, &(i * 4.0)).unwrap();
        assert!((d - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn w2_rejects_asymmetric_input() {
        let mut m = Matrix3::identity();
        m[(0, 2)] = 1e-3;
        assert!(matches!(
            gaussian_w2(&Vector3::zeros(), &m, &Vector3::zeros(), &Matrix3::identity()),
            Err(GmmError::Asymmetric(_))
        ));
    }

    #[test]
    fn prune_removes_far_voxels_only() {
        let mut map = VoxelMap::new(1.0, 5.0).unwrap();
        map.insert_points(&[Vector3::new(0.5, 0.5, 0.5), Vector3::new(1.5, 0.5, 0.5)]);
        assert_eq!(map.prune(&Vector3::new(0.5, 0.5, 0.5)), 0);
        // voxel centred at distance r_map + l
        map.insert_points(&[Vector3::new(6.5, 0.5, 0.5)]);
        let kept = *map.get(&VoxelKey(1, 0, 0)).unwrap();
        assert_eq!(map.prune(&Vector3::new(0.5, 0.5, 0.5)), 1);
        assert!(map.get(&VoxelKey(6, 0, 0)).is_none());
        assert_eq!(*map.get(&VoxelKey(1, 0, 0)).unwrap(), kept);
    }

    #[test]
    fn map_w2_skips_new_and_sparse_voxels() {
        let mut map = VoxelMap::new(1.0, 50.0).unwrap();
        let base: Vec<Vector3<f64>> = (0..10).map(|k| Vector3::new(0.05 + 0.09 * k as f64, 0.3 + 0.01 * k as f64, 0.5)).collect();
        map.insert_points(&base);
        let (touched, snap) = map.insert_with_snapshot(&[Vector3::new(0.9, 0.9, 0.9), Vector3::new(5.5, 5.5, 5.5)]);
        assert_eq!(touched.len(), 2);
        assert_eq!(snap.len(), 1);
        let d = map_w2(&snap, &map, &touched, &W2Options::default());
        assert_eq!(d.eligible, 1);
        let old = snap[&VoxelKey(0, 0, 0)];
        let new = map.get(&VoxelKey(0, 0, 0)).unwrap();
        let expected =
            gaussian_w2(&old.mean().unwrap(), &old.covariance().unwrap(), &new.mean().unwrap(), &new.covariance().unwrap()).unwrap();
        assert!((d.mean - expected).abs() < 1e-15);
        let strict = map_w2(&snap, &map, &touched, &W2Options { min_count: 11, ..Default::default() });
        assert_eq!(strict.eligible, 0);
        assert_eq!(strict.mean, 0.0);
    }
}
