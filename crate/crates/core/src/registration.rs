//! Point-to-plane ICP with a Hessian-based covariance.
//!
//! For a correspondence `(p, q, n)` the residual is `r = nᵀ(T p − q)`. With a
//! right perturbation `T · exp(δ)`, `δ = [ω | v]`, its Jacobian row is
//!
//! ```text
//! J = [ (p × a)ᵀ  aᵀ ],   a = Rᵀ n
//! ```
//!
//! Gauss-Newton accumulates `H = Σ Jᵀ W J` (here `W = I`). At convergence the
//! relative-pose covariance is `s · H⁻¹`, where `s` is the configured noise
//! scale (the point-to-plane noise variance in m²).

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::se3::{Pose, TangentCovariance, Twist};
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistrationError {
    #[error("normal estimation needs k >= 3, got {0}")]
    NeighborCount(usize),
    #[error("cloud has {len} points but k = {k} neighbours were requested")]
    TooFewPoints { len: usize, k: usize },
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
    #[error("{0} cloud contains non-finite coordinates")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    /// Correspondences farther apart than this are dropped, meters.
    pub max_corr_dist: f64,
    pub max_iter: usize,
    /// Stop once the update norm falls below this.
    pub tol: f64,
    /// Multiplier `s` on `H⁻¹`.
    pub noise_scale: f64,
    /// Neighbours used for target normals.
    pub normal_k: usize,
    /// Hessian condition number above which the result is flagged degenerate.
    pub max_condition: f64,
    pub min_correspondences: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_corr_dist: 1.0, max_iter: 50, tol: 1e-9, noise_scale: 0.01, normal_k: 10, max_condition: 1e8, min_correspondences: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Source point in the source frame.
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    /// Unit normal at the target point.
    pub normal: Vector3<f64>,
    /// Signed point-to-plane distance at the pose used for matching.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Transform taking source coordinates into the target frame.
    pub pose: Pose,
    /// `s · H⁻¹`; `None` when too few correspondences or `H` is singular.
    pub covariance: Option<TangentCovariance>,
    pub hessian: Matrix6<f64>,
    /// Fraction of source points with a correspondence.
    pub fitness: f64,
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub condition: f64,
    pub correspondences: usize,
    /// Objective after each accepted iterate, starting with the initial guess.
    pub cost_history: Vec<f64>,
}

impl RegistrationResult {
    /// Converged, well conditioned and carrying a covariance.
    pub fn usable(&self) -> bool {
        self.converged && !self.degenerate && self.covariance.is_some()
    }
}

/// Unit normals from the `k`-neighbourhood covariance (smallest eigenvector),
/// oriented toward the cloud origin. Degenerate neighbourhoods, where the two
/// smallest eigenvalues agree to within 1e-12 of the largest, yield `None`.
pub fn estimate_normals(cloud: &[Vector3<f64>], k: usize) -> Result<Vec<Option<Vector3<f64>>>, RegistrationError> {
    if k < 3 {
        return Err(RegistrationError::NeighborCount(k));
    }
    if cloud.len() < k {
        return Err(RegistrationError::TooFewPoints { len: cloud.len(), k });
    }
    let tree = KdTree::build(cloud);
    Ok(normals_with_tree(&tree, k))
}

fn normals_with_tree(tree: &KdTree, k: usize) -> Vec<Option<Vector3<f64>>> {
    tree.points()
        .iter()
        .map(|p| {
            let nbrs = tree.knn(p, k);
            let n = nbrs.len() as f64;
            let mean = nbrs.iter().fold(Vector3::zeros(), |acc, (i, _)| acc + tree.point(*i)) / n;
            let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, (i, _)| {
                let d = tree.point(*i) - mean;
                acc + d * d.transpose()
            }) / n;
            plane_normal(&cov).map(|normal| if normal.dot(&(-p)) < 0.0 { -normal } else { normal })
        })
        .collect()
}

fn plane_normal(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    if l2 <= 0.0 || (l1 - l0) <= 1e-12 * l2 {
        return None;
    }
    let n: Vector3<f64> = eig.eigenvectors.column(idx[0]).into_owned();
    Some(n.normalize())
}

/// Target cloud with its spatial index and normals, built once and reusable
/// across registrations.
#[derive(Debug, Clone)]
pub struct PlaneTarget {
    tree: KdTree,
    normals: Vec<Option<Vector3<f64>>>,
}

impl PlaneTarget {
    pub fn new(cloud: &[Vector3<f64>], k: usize) -> Result<Self, RegistrationError> {
        if cloud.is_empty() {
            return Err(RegistrationError::EmptyCloud("target"));
        }
        if k < 3 {
            return Err(RegistrationError::NeighborCount(k));
        }
        if cloud.len() < k {
            return Err(RegistrationError::TooFewPoints { len: cloud.len(), k });
        }
        let tree = KdTree::build(cloud);
        let normals = normals_with_tree(&tree, k);
        Ok(Self { tree, normals })
    }

    /// Target with externally supplied normals (unit length or `None`).
    pub fn with_normals(cloud: &[Vector3<f64>], normals: Vec<Option<Vector3<f64>>>) -> Self {
        assert_eq!(cloud.len(), normals.len(), "one normal per point");
        Self { tree: KdTree::build(cloud), normals }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn normals(&self) -> &[Option<Vector3<f64>>] {
        &self.normals
    }

    pub fn correspondences(&self, source: &[Vector3<f64>], pose: &Pose, max_dist: f64) -> Vec<Correspondence> {
        source
            .iter()
            .filter_map(|p| {
                let moved = pose.transform_point(p);
                let (idx, _) = self.tree.nearest_within(&moved, max_dist)?;
                let normal = self.normals[idx]?;
                let target = *self.tree.point(idx);
                Some(Correspondence { source: *p, target, normal, residual: normal.dot(&(moved - target)) })
            })
            .collect()
    }
}

/// `H = Σ JᵀJ` and `g = Σ Jᵀ r` at `pose`.
pub fn normal_equations(corrs: &[Correspondence], pose: &Pose) -> (Matrix6<f64>, Vector6<f64>) {
    let rt = pose.rotation.matrix().transpose();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        let a = rt * c.normal;
        let rot = c.source.cross(&a);
        let j = Vector6::new(rot.x, rot.y, rot.z, a.x, a.y, a.z);
        h += j * j.transpose();
        g += j * c.residual;
    }
    (h, g)
}

/// Truncated objective: matched points contribute r², unmatched ones the
/// squared gate distance. Normalized by the source size.
fn objective(corrs: &[Correspondence], source_len: usize, max_dist: f64) -> f64 {
    let matched: f64 = corrs.iter().map(|c| c.residual * c.residual).sum();
    (matched + (source_len - corrs.len()) as f64 * max_dist * max_dist) / source_len as f64
}

/// Registers `source` onto `target` starting from `init`.
pub fn icp_point_to_plane(
    source: &[Vector3<f64>],
    target: &PlaneTarget,
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<RegistrationResult, RegistrationError> {
    if source.is_empty() {
        return Err(RegistrationError::EmptyCloud("source"));
    }
    if target.is_empty() {
        return Err(RegistrationError::EmptyCloud("target"));
    }
    if source.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(RegistrationError::NonFinite("source"));
    }
    let max_dist = cfg.max_corr_dist;
    let mut pose = *init;
    let mut corrs = target.correspondences(source, &pose, max_dist);
    let mut cost = objective(&corrs, source.len(), max_dist);
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter && corrs.len() >= cfg.min_correspondences {
        iterations += 1;
        let (h, g) = normal_equations(&corrs, &pose);
        let damping = 1e-12 * h.trace().max(f64::MIN_POSITIVE);
        let Some(chol) = (h + Matrix6::identity() * damping).cholesky() else { break };
        let mut delta = -chol.solve(&g);
        let step_norm = delta.norm();

        // backtrack until the objective does not increase
        let mut accepted = None;
        for _ in 0..8 {
            let cand = pose.retract(&Twist(delta));
            let cand_corrs = target.correspondences(source, &cand, max_dist);
            let cand_cost = objective(&cand_corrs, source.len(), max_dist);
            if cand_cost <= cost {
                accepted = Some((cand, cand_corrs, cand_cost));
                break;
            }
            delta *= 0.5;
        }
        match accepted {
            Some((cand, cand_corrs, cand_cost)) => {
                pose = cand;
                corrs = cand_corrs;
                cost = cand_cost;
                history.push(cost);
            }
            None => {
                // no descent left along the Gauss-Newton direction
                converged = true;
                break;
            }
        }
        if step_norm < cfg.tol {
            converged = true;
            break;
        }
    }

    let (h, _) = normal_equations(&corrs, &pose);
    let enough = corrs.len() >= cfg.min_correspondences;
    let eig = SymmetricEigen::new(h).eigenvalues;
    let (lmin, lmax) = (eig.min(), eig.max());
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let covariance = if enough && lmin > 0.0 {
        h.cholesky().map(|c| {
            let inv = c.inverse();
            TangentCovariance::symmetrized(inv * cfg.noise_scale)
        })
    } else {
        None
    };
    let rms = if corrs.is_empty() {
        0.0
    } else {
        (corrs.iter().map(|c| c.residual * c.residual).sum::<f64>() / corrs.len() as f64).sqrt()
    };
    Ok(RegistrationResult {
        pose,
        covariance,
        hessian: h,
        fitness: corrs.len() as f64 / source.len() as f64,
        rms,
        iterations,
        converged: converged && enough,
        degenerate: !enough || condition > cfg.max_condition,
        condition,
        correspondences: corrs.len(),
        cost_history: history,
    })
}
