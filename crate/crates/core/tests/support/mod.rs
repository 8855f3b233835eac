//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;

use msmap::gmm::{voxel_key, VoxelKey};
use msmap::graph::{Factor, FactorNodes, NodeId, NoiseModel, PoseGraph};
use msmap::se3::{Pose, Rotation, TangentCovariance, Twist};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian3(r: &mut impl Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(r))
}

pub fn gaussian6(r: &mut impl Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| StandardNormal.sample(r))
}

pub fn random_pose(r: &mut impl Rng, rot: f64, trans: f64) -> Pose {
    let axis = gaussian3(r);
    let angle = r.random_range(-rot..rot);
    let rotation = Rotation::from_axis_angle(&axis.normalize(), angle);
    let t = Vector3::from_fn(|_, _| r.random_range(-trans..trans));
    Pose::new(rotation, t)
}

/// `A Aᵀ + eps·I` with entries of `A` uniform in `[-1, 1]`.
pub fn random_psd3(r: &mut impl Rng, eps: f64) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0));
    a * a.transpose() + Matrix3::identity() * eps
}

pub fn random_covariance6(r: &mut impl Rng, scale: f64) -> TangentCovariance {
    let a = Matrix6::from_fn(|_, _| r.random_range(-1.0..1.0)) * scale;
    TangentCovariance::new(a * a.transpose() + Matrix6::identity() * scale * scale * 0.1).unwrap()
}

// ---- pose graph ----

fn factor_residual(f: &Factor, poses: &BTreeMap<NodeId, Pose>) -> Vector6<f64> {
    let e = match f.nodes {
        FactorNodes::Unary(i) => f.measurement.inverse() * poses[&i],
        FactorNodes::Binary(i, j) => f.measurement.inverse() * poses[&i].inverse() * poses[&j],
    };
    e.log().expect("residual rotation below pi").0
}

pub fn dense_cost(graph: &PoseGraph, poses: &BTreeMap<NodeId, Pose>) -> f64 {
    graph
        .factors()
        .iter()
        .map(|f| {
            let e = factor_residual(f, poses);
            (e.transpose() * f.information * e)[(0, 0)]
        })
        .sum()
}

pub fn graph_poses(graph: &PoseGraph) -> BTreeMap<NodeId, Pose> {
    graph.nodes().iter().copied().collect()
}

fn stacked(graph: &PoseGraph, poses: &BTreeMap<NodeId, Pose>) -> DVector<f64> {
    let mut v = DVector::zeros(6 * graph.factors().len());
    for (k, f) in graph.factors().iter().enumerate() {
        v.rows_mut(6 * k, 6).copy_from(&factor_residual(f, poses));
    }
    v
}

fn block_information(graph: &PoseGraph) -> DMatrix<f64> {
    let m = graph.factors().len();
    let mut w = DMatrix::zeros(6 * m, 6 * m);
    for (k, f) in graph.factors().iter().enumerate() {
        w.view_mut((6 * k, 6 * k), (6, 6)).copy_from(&f.information);
    }
    w
}

/// Stacked residual Jacobian by central differences of `x ↦ x·exp(δ)`.
pub fn numeric_jacobian(graph: &PoseGraph, poses: &BTreeMap<NodeId, Pose>, h: f64) -> DMatrix<f64> {
    let ids: Vec<NodeId> = poses.keys().copied().collect();
    let m = graph.factors().len();
    let mut j = DMatrix::zeros(6 * m, 6 * ids.len());
    for (c, id) in ids.iter().enumerate() {
        for d in 0..6 {
            let mut delta = Vector6::zeros();
            delta[d] = h;
            let mut plus = poses.clone();
            plus.insert(*id, poses[id] * Pose::exp(&Twist(delta)));
            let mut minus = poses.clone();
            minus.insert(*id, poses[id] * Pose::exp(&Twist(-delta)));
            let col = (stacked(graph, &plus) - stacked(graph, &minus)) / (2.0 * h);
            j.set_column(6 * c + d, &col);
        }
    }
    j
}

/// Dense Gauss-Newton with finite-difference Jacobians and LU solves.
/// Returns the final poses and cost.
pub fn dense_gauss_newton(graph: &PoseGraph, iterations: usize) -> (BTreeMap<NodeId, Pose>, f64) {
    let mut poses = graph_poses(graph);
    let w = block_information(graph);
    for _ in 0..iterations {
        let j = numeric_jacobian(graph, &poses, 1e-6);
        let e = stacked(graph, &poses);
        let h = j.transpose() * &w * &j;
        let g = j.transpose() * &w * e;
        let Some(delta) = h.lu().solve(&(-g)) else { break };
        let ids: Vec<NodeId> = poses.keys().copied().collect();
        for (c, id) in ids.iter().enumerate() {
            let d = Vector6::from_iterator(delta.rows(6 * c, 6).iter().copied());
            let p = poses[id] * Pose::exp(&Twist(d));
            poses.insert(*id, p);
        }
        if delta.amax() < 1e-12 {
            break;
        }
    }
    let cost = dense_cost(graph, &poses);
    (poses, cost)
}

/// `(JᵀWJ)⁻¹` from finite-difference Jacobians at the graph's current poses.
pub fn dense_marginals(graph: &PoseGraph) -> BTreeMap<NodeId, Matrix6<f64>> {
    let poses = graph_poses(graph);
    let j = numeric_jacobian(graph, &poses, 1e-6);
    let h = j.transpose() * block_information(graph) * &j;
    let inv = h.try_inverse().expect("invertible information");
    poses.keys().enumerate().map(|(c, id)| (*id, inv.fixed_view::<6, 6>(6 * c, 6 * c).into_owned())).collect()
}

fn n(i: u32) -> NodeId {
    NodeId::new(0, i)
}

/// Noisy odometry chain with random loops, a prior on node 0 and a perturbed
/// initial estimate.
pub fn random_graph(seed: u64, nodes: u32, noise: NoiseModel) -> PoseGraph {
    let mut r = rng(seed);
    let truth: Vec<Pose> = (0..nodes)
        .scan(Pose::identity(), |p, i| {
            if i > 0 {
                *p = *p * random_pose(&mut r, 0.4, 1.5);
            }
            Some(*p)
        })
        .collect();
    let mut g = PoseGraph::new(noise);
    let mut est = Pose::identity();
    for i in 0..nodes {
        if i > 0 {
            est = est * Pose::between(&truth[i as usize - 1], &truth[i as usize]) * random_pose(&mut r, 0.05, 0.1);
        }
        g.add_node(n(i), est).unwrap();
    }
    let noisy = |r: &mut rand_chacha::ChaCha8Rng, z: Pose| z * Pose::exp(&Twist(gaussian6(r) * 0.02));
    g.add_prior(n(0), truth[0], &random_covariance6(&mut r, 0.05)).unwrap();
    for i in 1..nodes {
        let z = noisy(&mut r, Pose::between(&truth[i as usize - 1], &truth[i as usize]));
        g.add_odometry(n(i - 1), n(i), z, &random_covariance6(&mut r, 0.1)).unwrap();
    }
    for _ in 0..nodes / 2 {
        let a = r.random_range(0..nodes);
        let b = r.random_range(0..nodes);
        if a.abs_diff(b) > 1 {
            let z = noisy(&mut r, Pose::between(&truth[a as usize], &truth[b as usize]));
            g.add_loop_constraint(n(a), n(b), z, &random_covariance6(&mut r, 0.1)).unwrap();
        }
    }
    g
}

pub fn odometry_chain(len: u32) -> PoseGraph {
    let mut g = PoseGraph::new(NoiseModel::Upgo);
    let step = Pose::new(Rotation::yaw(0.2), Vector3::new(1.0, 0.1, 0.0));
    let mut p = Pose::identity();
    for i in 0..len {
        g.add_node(n(i), p).unwrap();
        if i > 0 {
            g.add_odometry(n(i - 1), n(i), step, &TangentCovariance::diagonal(1e-4, 1e-2)).unwrap();
        }
        p = p * step;
    }
    g.add_prior(n(0), Pose::identity(), &TangentCovariance::isotropic(1e-6)).unwrap();
    g
}

/// Square of four nodes whose loop measurements do not close; edge 0 carries
/// `strong` times the information of the others.
pub fn inconsistent_square(noise: NoiseModel, strong: f64) -> PoseGraph {
    let mut g = PoseGraph::new(noise);
    let side = Pose::new(Rotation::yaw(std::f64::consts::FRAC_PI_2), Vector3::new(2.0, 0.0, 0.0));
    let mut p = Pose::identity();
    for i in 0..4 {
        g.add_node(n(i), p).unwrap();
        p = p * side;
    }
    g.add_prior(n(0), Pose::identity(), &TangentCovariance::isotropic(1e-6)).unwrap();
    // every measured side is slightly too long and over-rotated
    let z = Pose::new(Rotation::yaw(std::f64::consts::FRAC_PI_2 + 0.05), Vector3::new(2.2, 0.0, 0.0));
    let base = 1e-1;
    for i in 0..4 {
        let cov = if i == 0 { TangentCovariance::isotropic(base / strong) } else { TangentCovariance::isotropic(base) };
        g.add_loop_constraint(n(i), n((i + 1) % 4), z, &cov).unwrap();
    }
    g
}

pub fn spread(g: &PoseGraph) -> f64 {
    let e: Vec<f64> = g.edge_error_report().unwrap().iter().skip(1).map(|e| e.unweighted).collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64
}

// ---- point clouds ----

pub fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<(usize, f64)> {
    points.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Same definition as the accuracy metric, evaluated over all pairs.
pub fn brute_accuracy(est: &[Vector3<f64>], truth: &[Vector3<f64>], knn: f64, inlier: f64) -> (f64, f64) {
    let d: Vec<f64> = est
        .iter()
        .filter_map(|p| brute_nearest(truth, p).map(|(_, d2)| d2.sqrt()))
        .filter(|d| *d <= knn && *d < inlier)
        .collect();
    let ac = (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt();
    (ac, d.len() as f64 / est.len() as f64)
}

pub fn brute_chamfer(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
    let side = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
        a.iter().map(|x| brute_nearest(b, x).unwrap().1.sqrt()).sum::<f64>() / a.len() as f64
    };
    side(p, q) + side(q, p)
}

/// Per-voxel count, mean and `n − 1` covariance computed in two passes.
/// Count, mean and covariance (absent below two points).
pub type BatchStats = (usize, Vector3<f64>, Option<Matrix3<f64>>);

pub fn batch_voxel_stats(points: &[Vector3<f64>], voxel: f64) -> BTreeMap<VoxelKey, BatchStats> {
    let mut groups: BTreeMap<VoxelKey, Vec<Vector3<f64>>> = BTreeMap::new();
    for p in points {
        groups.entry(voxel_key(p, voxel)).or_default().push(*p);
    }
    groups
        .into_iter()
        .map(|(k, pts)| {
            let n = pts.len();
            let mu = pts.iter().sum::<Vector3<f64>>() / n as f64;
            let cov = (n >= 2).then(|| pts.iter().map(|p| (p - mu) * (p - mu).transpose()).sum::<Matrix3<f64>>() / (n - 1) as f64);
            (k, (n, mu, cov))
        })
        .collect()
}

/// Points on three mutually orthogonal planes around the origin.
pub fn three_planes(spacing: f64, extent: f64) -> Vec<Vector3<f64>> {
    let steps = (extent / spacing) as i32;
    let mut pts = Vec::new();
    for i in 0..steps {
        for j in 0..steps {
            let (a, b) = (0.05 + i as f64 * spacing, 0.05 + j as f64 * spacing);
            pts.push(Vector3::new(a, b, 0.0));
            pts.push(Vector3::new(a, 0.0, b));
            pts.push(Vector3::new(0.0, a, b));
        }
    }
    pts
}

/// Unit normal of each point produced by [`three_planes`].
pub fn three_planes_normal(index: usize) -> Vector3<f64> {
    match index % 3 {
        0 => Vector3::z(),
        1 => Vector3::y(),
        _ => Vector3::x(),
    }
}

/// Outcome of repeated registrations against a target perturbed along its normals.
pub struct IcpTrials {
    /// Sample covariance of `log(T⁻¹ T̂)` around zero.
    pub empirical: Matrix6<f64>,
    /// Average of the covariances reported by the registrations.
    pub predicted: Matrix6<f64>,
    pub trials: usize,
}

/// Registers a clean copy of the three-planes scene onto `trials` noisy targets.
/// The covariance scale is set to `sigma²`, the variance of the injected noise.
pub fn icp_monte_carlo(sigma: f64, trials: usize, seed: u64) -> IcpTrials {
    use msmap::registration::{icp_point_to_plane, IcpConfig, PlaneTarget};
    let mut r = rng(seed);
    let clean = three_planes(0.05, 1.0);
    let truth = Pose::exp(&Twist::new(Vector3::new(0.01, -0.02, 0.015), Vector3::new(0.03, 0.02, -0.01)));
    let source: Vec<Vector3<f64>> = clean.iter().map(|p| truth.inverse().transform_point(p)).collect();
    let cfg = IcpConfig { noise_scale: sigma * sigma, max_corr_dist: 0.2, ..IcpConfig::default() };
    let mut empirical = Matrix6::zeros();
    let mut predicted = Matrix6::zeros();
    for _ in 0..trials {
        let target: Vec<Vector3<f64>> = clean
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let n: f64 = StandardNormal.sample(&mut r);
                p + three_planes_normal(i) * (sigma * n)
            })
            .collect();
        let plane = PlaneTarget::new(&target, cfg.normal_k).unwrap();
        let res = icp_point_to_plane(&source, &plane, &Pose::identity(), &cfg).unwrap();
        assert!(res.usable(), "trial did not converge cleanly");
        let e = (truth.inverse() * res.pose).log().unwrap().0;
        empirical += e * e.transpose();
        predicted += res.covariance.unwrap().matrix();
    }
    IcpTrials { empirical: empirical / trials as f64, predicted: predicted / trials as f64, trials }
}

// ---- two-room merge scenario ----

/// Reference survey (seed `seed`) and drifting revisit (seed `seed + 100`).
pub struct Scenario {
    pub scene: msmap::sim::Scene,
    pub reference: msmap::sim::Simulated,
    pub revisit: msmap::sim::Simulated,
}

pub fn scenario(seed: u64) -> Scenario {
    use msmap::sim::{generate_session, Scene, SessionSpec};
    let scene = Scene::two_rooms();
    let reference = generate_session(&scene, &SessionSpec::two_rooms_reference(seed)).unwrap();
    let revisit = generate_session(&scene, &SessionSpec::two_rooms_revisit(seed + 100)).unwrap();
    Scenario { scene, reference, revisit }
}

/// The shipped merge configuration with `mode` substituted.
pub fn merge_config(mode: msmap::pipeline::MergeMode) -> msmap::pipeline::PipelineConfig {
    let cfg = msmap::pipeline::PipelineConfig::parse(include_str!("../../../../data/merge.cfg")).unwrap();
    msmap::pipeline::PipelineConfig { mode, ..cfg }
}

pub fn run_merge(s: &Scenario, mode: msmap::pipeline::MergeMode) -> msmap::pipeline::MergeOutput {
    let cfg = merge_config(mode);
    let old = msmap::pipeline::PriorMap::from_session(&s.reference.session, &cfg).unwrap();
    msmap::pipeline::merge(&old, &s.revisit.session, &cfg).unwrap()
}
