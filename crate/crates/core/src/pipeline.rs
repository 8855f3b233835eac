//! Pipeline stages shared by the CLI and tests: keyframe filtering,
//! multi-session merging and evaluation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::cloud::{voxel_downsample, PointCloud};
use crate::gmm::Averaging;
use crate::graph::{DiagonalNoise, FactorKind, GraphError, NodeId, NoiseModel, NoiseTable, OptReport, OptimizerConfig, PoseGraph};
use crate::keyframe::{DecisionRecord, KeyframeConfig, KeyframeError, KeyframeMode, KeyframeSelector};
use crate::metrics::{self, MetricConfig, MetricError, Trajectory};
use crate::registration::{icp_point_to_plane, IcpConfig, PlaneTarget, RegistrationError};
use crate::se3::{relative_pose_covariance, Pose};
use crate::session::{Frame, Session};
use crate::spatial::KdTree;
use crate::store::Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeMode {
    /// Per-edge covariances.
    #[default]
    Upgo,
    /// Fixed diagonal noise table.
    Fpgo,
    /// Fixed noise with the motion-threshold keyframe gate.
    F2f,
    /// Fixed noise with loops replaced by map-prior factors.
    M2f,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Upgo => "upgo",
            MergeMode::Fpgo => "fpgo",
            MergeMode::F2f => "f2f",
            MergeMode::M2f => "m2f",
        })
    }
}

impl FromStr for MergeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "upgo" => Ok(MergeMode::Upgo),
            "fpgo" => Ok(MergeMode::Fpgo),
            "f2f" => Ok(MergeMode::F2f),
            "m2f" => Ok(MergeMode::M2f),
            other => Err(format!("unknown mode '{other}' (expected upgo, fpgo, f2f or m2f)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    /// Candidate search radius around the current estimate, meters.
    pub search_radius: f64,
    /// Old keyframes within this distance of the candidate form the target.
    pub submap_radius: f64,
    /// Downsampling voxel for source and target clouds.
    pub voxel: f64,
    pub min_fitness: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { search_radius: 5.0, submap_radius: 10.0, voxel: 0.2, min_fitness: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub mode: MergeMode,
    pub keyframe: KeyframeConfig,
    pub icp: IcpConfig,
    pub optimizer: OptimizerConfig,
    pub metric: MetricConfig,
    pub noise_table: NoiseTable,
    pub loops: LoopConfig,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl PipelineConfig {
    /// Parses line-oriented `key=value` text over the defaults. Unknown keys
    /// are rejected. `keyframe.tau` defaults to `0.3 · keyframe.voxel_size`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut tau = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let f = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let u = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            let b = || value.parse::<bool>().map_err(|e| err(format!("{key}: {e}")));
            let t = &mut cfg.noise_table;
            match key {
                "mode" => cfg.mode = value.parse().map_err(err)?,
                "seed" => cfg.seed = Some(value.parse().map_err(|e| err(format!("{key}: {e}")))?),
                "noise_scale" | "icp.noise_scale" => cfg.icp.noise_scale = f()?,
                "keyframe.mode" => cfg.keyframe.mode = value.parse().map_err(err)?,
                "keyframe.voxel_size" => cfg.keyframe.voxel_size = f()?,
                "keyframe.tau" => tau = Some(f()?),
                "keyframe.map_radius" => cfg.keyframe.map_radius = f()?,
                "keyframe.d_t" => cfg.keyframe.d_t = f()?,
                "keyframe.d_r" => cfg.keyframe.d_r = f()?,
                "keyframe.min_count" => cfg.keyframe.min_count = u()?,
                "keyframe.averaging" => {
                    cfg.keyframe.averaging = match value {
                        "unweighted" => Averaging::Unweighted,
                        "count" | "count_weighted" => Averaging::CountWeighted,
                        o => return Err(err(format!("unknown averaging '{o}'"))),
                    }
                }
                "icp.max_corr_dist" => cfg.icp.max_corr_dist = f()?,
                "icp.max_iter" => cfg.icp.max_iter = u()?,
                "icp.tol" => cfg.icp.tol = f()?,
                "icp.normal_k" => cfg.icp.normal_k = u()?,
                "icp.max_condition" => cfg.icp.max_condition = f()?,
                "icp.min_correspondences" => cfg.icp.min_correspondences = u()?,
                "opt.max_iter" => cfg.optimizer.max_iter = u()?,
                "opt.rel_tol" => cfg.optimizer.rel_tol = f()?,
                "opt.initial_lambda" => cfg.optimizer.initial_lambda = f()?,
                "opt.lambda_factor" => cfg.optimizer.lambda_factor = f()?,
                "metric.environment" => {
                    let keep = cfg.metric;
                    let base = match value {
                        "indoor" => MetricConfig::indoor(),
                        "outdoor" => MetricConfig::outdoor(),
                        o => return Err(err(format!("unknown environment '{o}'"))),
                    };
                    cfg.metric = MetricConfig { mme_radius: base.mme_radius, ..keep };
                }
                "metric.knn_distance" => cfg.metric.knn_distance = f()?,
                "metric.inlier_threshold" => cfg.metric.inlier_threshold = f()?,
                "metric.mme_radius" => cfg.metric.mme_radius = f()?,
                "metric.mme_min_neighbors" => cfg.metric.mme_min_neighbors = u()?,
                "metric.mme_det_floor" => cfg.metric.mme_det_floor = f()?,
                "metric.association_tolerance" => cfg.metric.association_tolerance = f()?,
                "metric.align" => cfg.metric.align = b()?,
                "loop.search_radius" => cfg.loops.search_radius = f()?,
                "loop.submap_radius" => cfg.loops.submap_radius = f()?,
                "loop.voxel" => cfg.loops.voxel = f()?,
                "loop.min_fitness" => cfg.loops.min_fitness = f()?,
                "fpgo.prior_rot" => t.prior.rotation = f()?,
                "fpgo.prior_trans" => t.prior.translation = f()?,
                "fpgo.odom_rot" => t.odometry.rotation = f()?,
                "fpgo.odom_trans" => t.odometry.translation = f()?,
                "fpgo.loop_rot" => t.loop_closure.rotation = f()?,
                "fpgo.loop_trans" => t.loop_closure.translation = f()?,
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        cfg.keyframe.tau = tau.unwrap_or(0.3 * cfg.keyframe.voxel_size);
        cfg.keyframe.validate().map_err(|e| ConfigError { line: 0, message: e.to_string() })?;
        cfg.metric.validate().map_err(|e| ConfigError { line: 0, message: e.to_string() })?;
        let positive = [
            cfg.icp.noise_scale,
            cfg.icp.max_corr_dist,
            cfg.loops.search_radius,
            cfg.loops.submap_radius,
        ];
        if t_all(&cfg.noise_table).iter().chain(positive.iter()).any(|v| !(*v > 0.0)) {
            return Err(ConfigError { line: 0, message: "noise values and radii must be positive".into() });
        }
        Ok(cfg)
    }

    /// Effective config text, parseable by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let k = &self.keyframe;
        let t = &self.noise_table;
        let mut lines = vec![
            format!("mode={}", self.mode),
            format!("noise_scale={}", self.icp.noise_scale),
            format!("keyframe.mode={}", k.mode),
            format!("keyframe.voxel_size={}", k.voxel_size),
            format!("keyframe.tau={}", k.tau),
            format!("keyframe.map_radius={}", k.map_radius),
            format!("keyframe.d_t={}", k.d_t),
            format!("keyframe.d_r={}", k.d_r),
            format!("keyframe.min_count={}", k.min_count),
            format!("keyframe.averaging={}", if k.averaging == Averaging::Unweighted { "unweighted" } else { "count" }),
            format!("icp.max_corr_dist={}", self.icp.max_corr_dist),
            format!("icp.max_iter={}", self.icp.max_iter),
            format!("icp.tol={}", self.icp.tol),
            format!("icp.normal_k={}", self.icp.normal_k),
            format!("icp.max_condition={}", self.icp.max_condition),
            format!("icp.min_correspondences={}", self.icp.min_correspondences),
            format!("opt.max_iter={}", self.optimizer.max_iter),
            format!("opt.rel_tol={}", self.optimizer.rel_tol),
            format!("opt.initial_lambda={}", self.optimizer.initial_lambda),
            format!("opt.lambda_factor={}", self.optimizer.lambda_factor),
            format!("metric.knn_distance={}", self.metric.knn_distance),
            format!("metric.inlier_threshold={}", self.metric.inlier_threshold),
            format!("metric.mme_radius={}", self.metric.mme_radius),
            format!("metric.mme_min_neighbors={}", self.metric.mme_min_neighbors),
            format!("metric.mme_det_floor={}", self.metric.mme_det_floor),
            format!("metric.association_tolerance={}", self.metric.association_tolerance),
            format!("metric.align={}", self.metric.align),
            format!("loop.search_radius={}", self.loops.search_radius),
            format!("loop.submap_radius={}", self.loops.submap_radius),
            format!("loop.voxel={}", self.loops.voxel),
            format!("loop.min_fitness={}", self.loops.min_fitness),
            format!("fpgo.prior_rot={}", t.prior.rotation),
            format!("fpgo.prior_trans={}", t.prior.translation),
            format!("fpgo.odom_rot={}", t.odometry.rotation),
            format!("fpgo.odom_trans={}", t.odometry.translation),
            format!("fpgo.loop_rot={}", t.loop_closure.rotation),
            format!("fpgo.loop_trans={}", t.loop_closure.translation),
        ];
        if let Some(seed) = self.seed {
            lines.insert(1, format!("seed={seed}"));
        }
        lines.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn noise_model(&self) -> NoiseModel {
        match self.mode {
            MergeMode::Upgo => NoiseModel::Upgo,
            _ => NoiseModel::Fpgo(self.noise_table),
        }
    }

    /// Keyframe gate used for the new session in this mode.
    pub fn keyframe_for_merge(&self) -> KeyframeConfig {
        let mode = if self.mode == MergeMode::F2f { KeyframeMode::Radius } else { self.keyframe.mode };
        KeyframeConfig { mode, ..self.keyframe }
    }
}

fn t_all(t: &NoiseTable) -> [f64; 6] {
    let v = |d: &DiagonalNoise| [d.rotation, d.translation];
    let (a, b, c) = (v(&t.prior), v(&t.odometry), v(&t.loop_closure));
    [a[0], a[1], b[0], b[1], c[0], c[1]]
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Keyframe(#[from] KeyframeError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Input(String),
}

impl PipelineError {
    /// Gauge deficiency or a singular information matrix.
    pub fn is_ill_posed(&self) -> bool {
        matches!(self, PipelineError::Graph(GraphError::GaugeFreedom { .. } | GraphError::SingularInformation))
    }
}

/// Runs the keyframe gate over a session's map-frame poses, setting each
/// frame's keyframe flag.
pub fn select_keyframes(session: &mut Session, cfg: &KeyframeConfig) -> Result<Vec<DecisionRecord>, PipelineError> {
    let mut sel = KeyframeSelector::new(*cfg)?;
    let init = session.init;
    for f in &mut session.frames {
        f.keyframe = sel.decide(&f.cloud.points, &(init * f.pose)).is_keyframe;
    }
    Ok(sel.history().to_vec())
}

fn node(f: &Frame) -> NodeId {
    NodeId::new(f.session, f.index)
}

/// Adds map-frame nodes for `frames` and odometry factors between consecutive ones.
fn add_chain(graph: &mut PoseGraph, init: &Pose, frames: &[&Frame]) -> Result<(), GraphError> {
    for f in frames {
        graph.add_node(node(f), *init * f.pose)?;
    }
    for w in frames.windows(2) {
        let (a, b) = (w[0], w[1]);
        let z = Pose::between(&a.pose, &b.pose);
        let cov = relative_pose_covariance(&a.pose, &a.covariance, &b.pose, &b.covariance);
        graph.add_odometry(node(a), node(b), z, &cov)?;
    }
    Ok(())
}

/// Old side of a merge: a pose graph over keyframes whose clouds are in `frames`.
#[derive(Debug, Clone)]
pub struct PriorMap {
    pub graph: PoseGraph,
    pub frames: HashMap<NodeId, Frame>,
}

impl PriorMap {
    /// Builds a graph from a session: its keyframes (or the gate's choice when
    /// none are flagged), a prior on the first keyframe and odometry factors.
    pub fn from_session(session: &Session, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let mut session = session.clone();
        if !session.has_keyframes() {
            select_keyframes(&mut session, &cfg.keyframe)?;
        }
        let kfs: Vec<&Frame> = session.keyframes().collect();
        let first = kfs.first().ok_or_else(|| PipelineError::Input("old session has no keyframes".into()))?;
        let mut graph = PoseGraph::new(cfg.noise_model());
        add_chain(&mut graph, &session.init, &kfs)?;
        graph.add_prior(node(first), session.init * first.pose, &first.covariance)?;
        let frames = kfs.iter().map(|f| (node(f), (*f).clone())).collect();
        Ok(Self { graph, frames })
    }

    /// Uses a stored graph; every node must have a frame in `session`.
    pub fn from_graph(graph: PoseGraph, session: &Session) -> Result<Self, PipelineError> {
        let mut frames: HashMap<NodeId, Frame> = session.frames.iter().map(|f| (node(f), f.clone())).collect();
        frames.retain(|id, _| graph.contains(*id));
        if let Some((id, _)) = graph.nodes().iter().find(|(id, _)| !frames.contains_key(id)) {
            return Err(PipelineError::Input(format!("graph node {id} has no frame in the session manifest")));
        }
        Ok(Self { graph, frames })
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    pub graph: PoseGraph,
    /// Keyframes of both sides with optimized map-frame poses and marginal covariances.
    pub merged: Session,
    pub map: PointCloud,
    pub decisions: Vec<DecisionRecord>,
    pub optimization: OptReport,
    pub report: Report,
    /// New-session keyframes with optimized poses.
    pub new_trajectory: Trajectory,
    /// New-session keyframes with their pre-merge map-frame odometry poses.
    pub new_odometry: Trajectory,
}

struct LoopSearch<'a> {
    cfg: &'a PipelineConfig,
    old: &'a PriorMap,
    ids: Vec<NodeId>,
    positions: KdTree,
    targets: HashMap<NodeId, PlaneTarget>,
}

impl<'a> LoopSearch<'a> {
    fn new(cfg: &'a PipelineConfig, old: &'a PriorMap) -> Self {
        let ids: Vec<NodeId> = old.graph.nodes().iter().map(|(id, _)| *id).filter(|id| old.frames.contains_key(id)).collect();
        let pts: Vec<Vector3<f64>> = ids.iter().map(|id| old.graph.pose(*id).unwrap().translation).collect();
        Self { cfg, old, positions: KdTree::build(&pts), ids, targets: HashMap::new() }
    }

    fn candidate(&self, estimate: &Pose) -> Option<NodeId> {
        self.positions.nearest_within(&estimate.translation, self.cfg.loops.search_radius).map(|(i, _)| self.ids[i])
    }

    fn target(&mut self, cand: NodeId) -> Result<&PlaneTarget, PipelineError> {
        if !self.targets.contains_key(&cand) {
            let anchor = *self.old.graph.pose(cand).unwrap();
            let inv = anchor.inverse();
            let mut pts = Vec::new();
            for i in self.positions.within_radius(&anchor.translation, self.cfg.loops.submap_radius) {
                let id = self.ids[i];
                let rel = inv * *self.old.graph.pose(id).unwrap();
                pts.extend(self.old.frames[&id].cloud.points.iter().map(|p| rel.transform_point(p)));
            }
            let pts = voxel_downsample(&pts, self.cfg.loops.voxel);
            self.targets.insert(cand, PlaneTarget::new(&pts, self.cfg.icp.normal_k)?);
        }
        Ok(&self.targets[&cand])
    }
}

/// Merges `new` into `old`: gates the new session's keyframes, links them by
/// odometry, searches loop candidates against the old keyframes, optimizes
/// and extracts marginals.
pub fn merge(old: &PriorMap, new: &Session, cfg: &PipelineConfig) -> Result<MergeOutput, PipelineError> {
    let mut session = new.clone();
    let decisions = select_keyframes(&mut session, &cfg.keyframe_for_merge())?;
    let kfs: Vec<&Frame> = session.keyframes().collect();
    if kfs.is_empty() {
        return Err(PipelineError::Input("new session produced no keyframes".into()));
    }
    let mut graph = old.graph.clone();
    add_chain(&mut graph, &session.init, &kfs)?;

    let mut search = LoopSearch::new(cfg, old);
    let mut correction = Pose::identity();
    let (mut candidates, mut accepted) = (0usize, 0usize);
    for f in &kfs {
        let odom = session.init * f.pose;
        let estimate = correction * odom;
        let Some(cand) = search.candidate(&estimate) else { continue };
        candidates += 1;
        let anchor = *old.graph.pose(cand).unwrap();
        let source = voxel_downsample(&f.cloud.points, cfg.loops.voxel);
        if source.is_empty() {
            continue;
        }
        let target = search.target(cand)?;
        let reg = icp_point_to_plane(&source, target, &(anchor.inverse() * estimate), &cfg.icp)?;
        if !reg.usable() || reg.fitness < cfg.loops.min_fitness {
            continue;
        }
        let cov = reg.covariance.expect("usable registration has a covariance");
        let located = anchor * reg.pose;
        if cfg.mode == MergeMode::M2f {
            graph.add_map_prior(node(f), located, &cov)?;
        } else if !graph.add_loop(cand, node(f), &reg)? {
            continue;
        }
        accepted += 1;
        correction = located * odom.inverse();
    }

    let optimization = graph.optimize(&cfg.optimizer)?;
    let marginals = graph.marginals()?;

    let mut merged = Session::new(session.id, Pose::identity());
    let mut map = PointCloud::default();
    for (id, pose) in graph.nodes() {
        let src = old.frames.get(id).or_else(|| kfs.iter().copied().find(|f| node(f) == *id));
        let Some(src) = src else { continue };
        map.extend_transformed(&src.cloud, pose);
        merged.frames.push(Frame {
            pose: *pose,
            covariance: *marginals.get(*id).expect("marginal for every node"),
            keyframe: true,
            ..src.clone()
        });
    }
    let new_trajectory = Trajectory::new(kfs.iter().map(|f| (f.timestamp, *graph.pose(node(f)).unwrap())).collect())?;
    let new_odometry = Trajectory::new(kfs.iter().map(|f| (f.timestamp, session.init * f.pose)).collect())?;

    let mut report = Report::default();
    report.push("mode", cfg.mode);
    report.push("old_keyframes", old.graph.nodes().len());
    report.push("new_frames", session.frames.len());
    report.push("new_keyframes", kfs.len());
    report.push_f64("keyframe_ratio", kfs.len() as f64 / session.frames.len().max(1) as f64);
    report.push("loop_candidates", candidates);
    report.push("loops_accepted", accepted);
    report.push("loop_factors", graph.count(FactorKind::Loop));
    report.push("map_prior_factors", graph.count(FactorKind::MapPrior));
    report.push_f64("initial_cost", optimization.initial_cost);
    report.push_f64("final_cost", optimization.final_cost);
    report.push("iterations", optimization.iterations);
    report.push("converged", optimization.converged);
    report.push_f64("condition", optimization.condition);

    Ok(MergeOutput { graph, merged, map, decisions, optimization, report, new_trajectory, new_odometry })
}

/// Metric report over an estimate and ground truth. Trajectory metrics are
/// skipped when either trajectory is absent.
pub fn evaluate(
    estimate: Option<&Trajectory>,
    truth: Option<&Trajectory>,
    estimate_map: &PointCloud,
    truth_map: &PointCloud,
    cfg: &MetricConfig,
) -> Result<Report, PipelineError> {
    let mut r = Report::default();
    if let (Some(e), Some(t)) = (estimate, truth) {
        r.push_f64("ate_m", metrics::ate(e, t, cfg)?);
        r.push("ate_poses", metrics::associate(e, t, cfg.association_tolerance).len());
        r.push("ate_aligned", cfg.align);
    }
    let acc = metrics::accuracy(estimate_map, truth_map, cfg)?;
    r.push_f64("ac_m", acc.ac);
    r.push_f64("inlier_fraction", acc.inlier_fraction);
    r.push_f64("cd_m", metrics::chamfer(estimate_map, truth_map)?);
    match metrics::mme(estimate_map, cfg) {
        Ok(h) => {
            r.push_f64("mme", h.mme);
            r.push_f64("mme_valid_fraction", h.valid_fraction);
        }
        Err(MetricError::NoValidPoints) => r.push_f64("mme_valid_fraction", 0.0),
        Err(e) => return Err(e.into()),
    }
    r.push("map_points", estimate_map.len());
    Ok(r)
}
