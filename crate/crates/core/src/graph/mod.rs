//! Pose graph over SE(3) with prior, odometry, loop and map-prior factors.
//!
//! Residuals use the right-perturbation convention:
//!
//! * unary (prior, map prior): `e = log(z⁻¹ · x)`
//! * binary (odometry, loop):  `e = log(z⁻¹ · x_i⁻¹ · x_j)`
//!
//! and the cost is `Σ eᵀ Ω e`. Two noise models are supported: [`NoiseModel::Upgo`]
//! takes each factor's covariance as supplied (odometry from relative-pose
//! propagation, loops from the ICP Hessian, the prior from the front end),
//! while [`NoiseModel::Fpgo`] ignores supplied covariances and uses a fixed
//! diagonal table per factor kind.

mod solve;

use std::collections::HashMap;
use std::fmt;

use nalgebra::Matrix6;

use crate::registration::RegistrationResult;
use crate::se3::{Pose, Se3Error, TangentCovariance};

pub use solve::{EdgeError, MarginalReport, OptReport, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("node {0} already has a prior factor")]
    DuplicatePrior(NodeId),
    #[error("a between factor needs two distinct nodes, got {0} twice")]
    SelfLoop(NodeId),
    #[error("invalid covariance: {0}")]
    Covariance(#[from] Se3Error),
    #[error(
        "ill-posed optimization: {components} connected component(s) have no prior factor \
         (gauge freedom), e.g. node {example}"
    )]
    GaugeFreedom { components: usize, example: NodeId },
    #[error("information matrix is singular (gauge freedom or unconstrained directions)")]
    SingularInformation,
    #[error("non-finite cost or residual")]
    NonFinite,
}

/// Node identifier: session and frame index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub session: u32,
    pub index: u32,
}

impl NodeId {
    pub fn new(session: u32, index: u32) -> Self {
        Self { session, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.session, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    /// Gauge-fixing prior on the first pose.
    Prior,
    Odometry,
    Loop,
    /// Unary pose constraint from localizing against a prior map.
    MapPrior,
}

impl FactorKind {
    pub fn is_unary(&self) -> bool {
        matches!(self, FactorKind::Prior | FactorKind::MapPrior)
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactorKind::Prior => "prior",
            FactorKind::Odometry => "odometry",
            FactorKind::Loop => "loop",
            FactorKind::MapPrior => "map_prior",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorNodes {
    Unary(NodeId),
    Binary(NodeId, NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub nodes: FactorNodes,
    pub measurement: Pose,
    pub covariance: TangentCovariance,
    pub information: Matrix6<f64>,
}

/// Rotation and translation variances of one diagonal noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalNoise {
    pub rotation: f64,
    pub translation: f64,
}

impl DiagonalNoise {
    pub fn covariance(&self) -> TangentCovariance {
        TangentCovariance::diagonal(self.rotation, self.translation)
    }
}

/// Fixed per-kind noise for [`NoiseModel::Fpgo`]. Entries are variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseTable {
    pub prior: DiagonalNoise,
    pub odometry: DiagonalNoise,
    pub loop_closure: DiagonalNoise,
}

impl Default for NoiseTable {
    fn default() -> Self {
        Self {
            prior: DiagonalNoise { rotation: 1e-2, translation: 1e0 },
            odometry: DiagonalNoise { rotation: 1e-8, translation: 1e-6 },
            loop_closure: DiagonalNoise { rotation: 1e-1, translation: 1e-1 },
        }
    }
}

impl NoiseTable {
    pub fn for_kind(&self, kind: FactorKind) -> DiagonalNoise {
        match kind {
            FactorKind::Prior => self.prior,
            FactorKind::Odometry => self.odometry,
            FactorKind::Loop | FactorKind::MapPrior => self.loop_closure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Upgo,
    Fpgo(NoiseTable),
}

#[derive(Debug, Clone)]
pub struct PoseGraph {
    nodes: Vec<(NodeId, Pose)>,
    index: HashMap<NodeId, usize>,
    factors: Vec<Factor>,
    noise: NoiseModel,
}

impl PoseGraph {
    pub fn new(noise: NoiseModel) -> Self {
        Self { nodes: Vec::new(), index: HashMap::new(), factors: Vec::new(), noise }
    }

    pub fn noise_model(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn add_node(&mut self, id: NodeId, pose: Pose) -> Result<(), GraphError> {
        if self.index.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        self.index.insert(id, self.nodes.len());
        self.nodes.push((id, pose));
        Ok(())
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> &[(NodeId, Pose)] {
        &self.nodes
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn pose(&self, id: NodeId) -> Option<&Pose> {
        self.index.get(&id).map(|&i| &self.nodes[i].1)
    }

    pub fn set_pose(&mut self, id: NodeId, pose: Pose) -> Result<(), GraphError> {
        let i = *self.index.get(&id).ok_or(GraphError::UnknownNode(id))?;
        self.nodes[i].1 = pose;
        Ok(())
    }

    pub(crate) fn slot(&self, id: NodeId) -> usize {
        self.index[&id]
    }

    fn require(&self, id: NodeId) -> Result<(), GraphError> {
        if self.contains(id) { Ok(()) } else { Err(GraphError::UnknownNode(id)) }
    }

    fn noise_for(&self, kind: FactorKind, supplied: &TangentCovariance) -> Result<(TangentCovariance, Matrix6<f64>), GraphError> {
        let cov = match &self.noise {
            NoiseModel::Upgo => TangentCovariance::new(*supplied.matrix())?,
            NoiseModel::Fpgo(table) => table.for_kind(kind).covariance(),
        };
        let info = cov.information()?;
        Ok((cov, info))
    }

    /// Appends a factor with an explicit information matrix, bypassing the
    /// noise model. Used when loading stored graphs.
    pub fn push_factor_with_information(
        &mut self,
        kind: FactorKind,
        nodes: FactorNodes,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<(), GraphError> {
        match nodes {
            FactorNodes::Unary(a) => self.require(a)?,
            FactorNodes::Binary(a, b) => {
                self.require(a)?;
                self.require(b)?;
                if a == b {
                    return Err(GraphError::SelfLoop(a));
                }
            }
        }
        if kind == FactorKind::Prior {
            if let FactorNodes::Unary(a) = nodes {
                self.check_no_prior(a)?;
            }
        }
        let covariance = TangentCovariance::from_information(&information)?;
        let information = TangentCovariance::symmetrized(information);
        self.factors.push(Factor { kind, nodes, measurement, covariance, information: *information.matrix() });
        Ok(())
    }

    fn check_no_prior(&self, node: NodeId) -> Result<(), GraphError> {
        let dup = self.factors.iter().any(|f| f.kind == FactorKind::Prior && f.nodes == FactorNodes::Unary(node));
        if dup { Err(GraphError::DuplicatePrior(node)) } else { Ok(()) }
    }

    /// Gauge-fixing prior. Under FPGO the supplied covariance is replaced by
    /// the table's prior noise.
    pub fn add_prior(&mut self, node: NodeId, pose: Pose, cov: &TangentCovariance) -> Result<(), GraphError> {
        self.require(node)?;
        self.check_no_prior(node)?;
        let (covariance, information) = self.noise_for(FactorKind::Prior, cov)?;
        self.factors.push(Factor { kind: FactorKind::Prior, nodes: FactorNodes::Unary(node), measurement: pose, covariance, information });
        Ok(())
    }

    /// Absolute pose constraint from map localization. Uses loop noise under FPGO.
    pub fn add_map_prior(&mut self, node: NodeId, pose: Pose, cov: &TangentCovariance) -> Result<(), GraphError> {
        self.require(node)?;
        let (covariance, information) = self.noise_for(FactorKind::MapPrior, cov)?;
        self.factors.push(Factor { kind: FactorKind::MapPrior, nodes: FactorNodes::Unary(node), measurement: pose, covariance, information });
        Ok(())
    }

    fn add_between(&mut self, kind: FactorKind, i: NodeId, j: NodeId, z: Pose, cov: &TangentCovariance) -> Result<(), GraphError> {
        self.require(i)?;
        self.require(j)?;
        if i == j {
            return Err(GraphError::SelfLoop(i));
        }
        let (covariance, information) = self.noise_for(kind, cov)?;
        self.factors.push(Factor { kind, nodes: FactorNodes::Binary(i, j), measurement: z, covariance, information });
        Ok(())
    }

    /// Odometry constraint: `measurement` is the pose of `j` in the frame of `i`.
    pub fn add_odometry(&mut self, i: NodeId, j: NodeId, measurement: Pose, cov: &TangentCovariance) -> Result<(), GraphError> {
        self.add_between(FactorKind::Odometry, i, j, measurement, cov)
    }

    /// Loop constraint with an explicit measurement.
    pub fn add_loop_constraint(&mut self, i: NodeId, j: NodeId, measurement: Pose, cov: &TangentCovariance) -> Result<(), GraphError> {
        self.add_between(FactorKind::Loop, i, j, measurement, cov)
    }

    /// Adds a loop factor from a registration of node `j`'s scan against node
    /// `i`'s map. Unusable registrations (unconverged, degenerate or without
    /// covariance) are rejected and leave the graph unchanged.
    pub fn add_loop(&mut self, i: NodeId, j: NodeId, registration: &RegistrationResult) -> Result<bool, GraphError> {
        let Some(cov) = registration.covariance.filter(|_| registration.usable()) else {
            return Ok(false);
        };
        self.add_loop_constraint(i, j, registration.pose, &cov)?;
        Ok(true)
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }
}
