use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::{Factor, FactorKind, FactorNodes, GraphError, NodeId, PoseGraph};
use crate::se3::{Pose, TangentCovariance, Twist};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_lambda: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_iter: 100, rel_tol: 1e-12, initial_lambda: 1e-4, lambda_factor: 10.0, max_lambda: 1e12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Eigenvalue condition number of the undamped information matrix at the solution.
    pub condition: f64,
}

/// Per-factor residual after optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeError {
    pub index: usize,
    pub kind: FactorKind,
    pub nodes: FactorNodes,
    pub residual: Twist,
    /// `‖e‖`
    pub unweighted: f64,
    /// `sqrt(eᵀ Ω e)`
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalReport {
    pub entries: Vec<(NodeId, TangentCovariance)>,
}

impl MarginalReport {
    pub fn get(&self, id: NodeId) -> Option<&TangentCovariance> {
        self.entries.iter().find(|(n, _)| *n == id).map(|(_, c)| c)
    }
}

struct Linearized {
    residual: Vector6<f64>,
    /// Jacobian blocks paired with the node slot they act on.
    blocks: [(usize, Matrix6<f64>); 2],
    arity: usize,
}

impl PoseGraph {
    fn residual(&self, f: &Factor, poses: &[(NodeId, Pose)]) -> Result<Twist, GraphError> {
        let x = |id: NodeId| &poses[self.slot(id)].1;
        let err = match f.nodes {
            FactorNodes::Unary(a) => f.measurement.inverse() * *x(a),
            FactorNodes::Binary(a, b) => f.measurement.inverse() * Pose::between(x(a), x(b)),
        };
        err.log().map_err(|_| GraphError::NonFinite)
    }

    fn linearize(&self, f: &Factor) -> Result<Linearized, GraphError> {
        let e = self.residual(f, &self.nodes)?;
        let jr_inv = e.right_jacobian_inv();
        Ok(match f.nodes {
            FactorNodes::Unary(a) => Linearized { residual: e.0, blocks: [(self.slot(a), jr_inv), (0, Matrix6::zeros())], arity: 1 },
            FactorNodes::Binary(a, b) => {
                let rel = Pose::between(&self.nodes[self.slot(a)].1, &self.nodes[self.slot(b)].1);
                let ji = -jr_inv * rel.inverse().adjoint();
                Linearized { residual: e.0, blocks: [(self.slot(a), ji), (self.slot(b), jr_inv)], arity: 2 }
            }
        })
    }

    /// Jacobians of a factor's residual with respect to right perturbations of
    /// its node(s), in node order.
    pub fn factor_jacobians(&self, index: usize) -> Result<Vec<Matrix6<f64>>, GraphError> {
        let lin = self.linearize(&self.factors[index])?;
        Ok(lin.blocks[..lin.arity].iter().map(|(_, j)| *j).collect())
    }

    /// Residual of factor `index` at the current estimate.
    pub fn factor_residual(&self, index: usize) -> Result<Twist, GraphError> {
        self.residual(&self.factors[index], &self.nodes)
    }

    fn cost_at(&self, poses: &[(NodeId, Pose)]) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for f in &self.factors {
            let e = self.residual(f, poses)?.0;
            total += (e.transpose() * f.information * e)[(0, 0)];
        }
        if total.is_finite() { Ok(total) } else { Err(GraphError::NonFinite) }
    }

    /// `Σ eᵀ Ω e` at the current estimate.
    pub fn cost(&self) -> Result<f64, GraphError> {
        self.cost_at(&self.nodes)
    }

    /// Gauss-Newton normal equations `H δ = -g` at the current estimate.
    pub fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>), GraphError> {
        let dim = 6 * self.nodes.len();
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for f in &self.factors {
            let lin = self.linearize(f)?;
            let blocks = &lin.blocks[..lin.arity];
            for &(a, ja) in blocks {
                let jt_w = ja.transpose() * f.information;
                let ga = jt_w * lin.residual;
                let mut gv = g.rows_mut(6 * a, 6);
                gv += ga;
                for &(b, jb) in blocks {
                    let hab = jt_w * jb;
                    let mut view = h.view_mut((6 * a, 6 * b), (6, 6));
                    view += hab;
                }
            }
        }
        Ok((h, g))
    }

    /// Undamped information matrix `JᵀΩJ` at the current estimate.
    pub fn information_matrix(&self) -> Result<DMatrix<f64>, GraphError> {
        Ok(self.normal_equations()?.0)
    }

    /// Fails with [`GraphError::GaugeFreedom`] if any connected component has no
    /// unary factor.
    pub fn check_gauge(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for f in &self.factors {
            if let FactorNodes::Binary(a, b) = f.nodes {
                let (ra, rb) = (find(&mut parent, self.slot(a)), find(&mut parent, self.slot(b)));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut anchored = vec![false; n];
        for f in &self.factors {
            if let FactorNodes::Unary(a) = f.nodes {
                let r = find(&mut parent, self.slot(a));
                anchored[r] = true;
            }
        }
        let mut free = Vec::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            if r == i && !anchored[r] {
                free.push(i);
            }
        }
        match free.first() {
            None => Ok(()),
            Some(&i) => Err(GraphError::GaugeFreedom { components: free.len(), example: self.nodes[i].0 }),
        }
    }

    /// Levenberg-Marquardt with `λ · diag(H)` damping and retraction `x ← x · exp(δ)`.
    pub fn optimize(&mut self, cfg: &OptimizerConfig) -> Result<OptReport, GraphError> {
        self.check_gauge()?;
        let initial_cost = self.cost()?;
        let mut cost = initial_cost;
        let mut lambda = cfg.initial_lambda;
        let mut iterations = 0;
        let mut converged = cost == 0.0;
        while !converged && iterations < cfg.max_iter {
            let (h, g) = self.normal_equations()?;
            let mut accepted = None;
            while lambda <= cfg.max_lambda {
                let mut a = h.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                let Some(chol) = a.cholesky() else {
                    lambda *= cfg.lambda_factor;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let candidate: Vec<(NodeId, Pose)> = self
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(k, (id, p))| (*id, p.retract(&Twist(delta.fixed_rows::<6>(6 * k).into_owned()))))
                    .collect();
                let new_cost = self.cost_at(&candidate)?;
                if new_cost < cost {
                    accepted = Some((candidate, new_cost, delta.amax()));
                    lambda = (lambda / cfg.lambda_factor).max(1e-15);
                    break;
                }
                lambda *= cfg.lambda_factor;
            }
            iterations += 1;
            match accepted {
                None => converged = true,
                Some((poses, new_cost, step)) => {
                    let decrease = cost - new_cost;
                    self.nodes = poses;
                    cost = new_cost;
                    converged = decrease <= cfg.rel_tol * cost.max(f64::MIN_POSITIVE) || step < 1e-14 || cost == 0.0;
                }
            }
        }
        let condition = condition_number(&self.information_matrix()?);
        Ok(OptReport { initial_cost, final_cost: cost, iterations, converged, condition })
    }

    /// Per-node covariance from the dense inverse of the information matrix.
    pub fn marginals(&self) -> Result<MarginalReport, GraphError> {
        self.check_gauge()?;
        let h = self.information_matrix()?;
        let chol = h.cholesky().ok_or(GraphError::SingularInformation)?;
        let inv = chol.inverse();
        let mut entries = Vec::with_capacity(self.nodes.len());
        for (k, (id, _)) in self.nodes.iter().enumerate() {
            let block: Matrix6<f64> = inv.fixed_view::<6, 6>(6 * k, 6 * k).into_owned();
            entries.push((*id, TangentCovariance::symmetrized(block)));
        }
        Ok(MarginalReport { entries })
    }

    /// Residual norms for every factor, in insertion order.
    pub fn edge_error_report(&self) -> Result<Vec<EdgeError>, GraphError> {
        self.factors
            .iter()
            .enumerate()
            .map(|(index, f)| {
                let e = self.residual(f, &self.nodes)?;
                let w = (e.0.transpose() * f.information * e.0)[(0, 0)];
                Ok(EdgeError { index, kind: f.kind, nodes: f.nodes, residual: e, unweighted: e.norm(), weighted: w.max(0.0).sqrt() })
            })
            .collect()
    }
}

fn condition_number(h: &DMatrix<f64>) -> f64 {
    if h.is_empty() {
        return 1.0;
    }
    let eig = h.clone().symmetric_eigen().eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 { f64::INFINITY } else { max / min }
}

#[cfg(test)]
mod tests {
    use super::super::{NoiseModel, NoiseTable};
    use super::*;
    use nalgebra::Vector3;

    fn n(i: u32) -> NodeId {
        NodeId::new(0, i)
    }

    fn chain(len: u32) -> PoseGraph {
        let mut g = PoseGraph::new(NoiseModel::Upgo);
        let step = Pose::new(crate::se3::Rotation::yaw(0.1), Vector3::new(1.0, 0.0, 0.0));
        let mut p = Pose::identity();
        for i in 0..len {
            g.add_node(n(i), p).unwrap();
            if i > 0 {
                g.add_odometry(n(i - 1), n(i), step, &TangentCovariance::isotropic(1e-3)).unwrap();
            }
            p = p * step;
        }
        g.add_prior(n(0), Pose::identity(), &TangentCovariance::isotropic(1e-4)).unwrap();
        g
    }

    #[test]
    fn consistent_graph_has_zero_cost() {
        let mut g = chain(4);
        let r = g.optimize(&OptimizerConfig::default()).unwrap();
        assert!(r.final_cost < 1e-20);
        assert!(r.converged && r.iterations <= 1);
        assert!(g.edge_error_report().unwrap().iter().all(|e| e.unweighted < 1e-12));
    }

    #[test]
    fn recovers_perturbed_chain() {
        let truth = chain(3);
        let mut g = truth.clone();
        g.set_pose(n(1), Pose::from_translation(Vector3::new(0.7, 0.3, -0.2))).unwrap();
        g.set_pose(n(2), Pose::identity()).unwrap();
        let r = g.optimize(&OptimizerConfig::default()).unwrap();
        assert!(r.converged);
        for (id, p) in truth.nodes() {
            let (dt, dr) = Pose::distance(p, g.pose(*id).unwrap());
            assert!(dt < 1e-9 && dr < 1e-9, "{id}: {dt} {dr}");
        }
    }

    #[test]
    fn prior_free_graph_is_rejected() {
        let mut g = PoseGraph::new(NoiseModel::Fpgo(NoiseTable::default()));
        g.add_node(n(0), Pose::identity()).unwrap();
        g.add_node(n(1), Pose::identity()).unwrap();
        g.add_odometry(n(0), n(1), Pose::identity(), &TangentCovariance::isotropic(1.0)).unwrap();
        assert!(matches!(g.optimize(&OptimizerConfig::default()), Err(GraphError::GaugeFreedom { components: 1, .. })));
        assert!(g.marginals().is_err());
    }

    #[test]
    fn single_node_marginal_equals_prior() {
        let mut g = PoseGraph::new(NoiseModel::Upgo);
        g.add_node(n(0), Pose::identity()).unwrap();
        let cov = TangentCovariance::diagonal(1e-3, 4e-2);
        g.add_prior(n(0), Pose::identity(), &cov).unwrap();
        let m = g.marginals().unwrap();
        assert!((m.get(n(0)).unwrap().matrix() - cov.matrix()).amax() < 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut g = PoseGraph::new(NoiseModel::Upgo);
        let a = Pose::exp(&Twist::from_slice(&[0.3, -0.2, 0.5, 1.0, 2.0, -0.5]));
        let b = Pose::exp(&Twist::from_slice(&[-0.4, 0.1, 1.2, -1.0, 0.5, 0.3]));
        let z = Pose::exp(&Twist::from_slice(&[0.2, 0.3, 0.4, 0.5, -0.6, 0.7]));
        g.add_node(n(0), a).unwrap();
        g.add_node(n(1), b).unwrap();
        g.add_prior(n(0), z, &TangentCovariance::isotropic(1.0)).unwrap();
        g.add_odometry(n(0), n(1), z, &TangentCovariance::isotropic(1.0)).unwrap();
        let h = 1e-6;
        for f in 0..2 {
            let jac = g.factor_jacobians(f).unwrap();
            for (slot, j) in jac.iter().enumerate() {
                let id = n(slot as u32);
                let base = *g.pose(id).unwrap();
                for k in 0..6 {
                    let mut d = Vector6::zeros();
                    d[k] = h;
                    let mut gp = g.clone();
                    gp.set_pose(id, base.retract(&Twist(d))).unwrap();
                    let mut gm = g.clone();
                    gm.set_pose(id, base.retract(&Twist(-d))).unwrap();
                    let fd = (gp.factor_residual(f).unwrap().0 - gm.factor_residual(f).unwrap().0) / (2.0 * h);
                    let err = (fd - j.column(k)).amax();
                    assert!(err < 1e-5 * j.amax(), "factor {f} node {slot} col {k}: {err}");
                }
            }
        }
    }
}
