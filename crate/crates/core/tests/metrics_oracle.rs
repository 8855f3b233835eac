mod support;

use msmap::cloud::PointCloud;
use msmap::metrics::{accuracy, ate, chamfer, mme, MetricConfig, MetricError, Trajectory};
use msmap::se3::{Pose, Rotation};
use nalgebra::Vector3;
use rand::Rng;
use std::f64::consts::{E, PI};

fn random_cloud(r: &mut impl Rng, n: usize, extent: f64) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::from_fn(|_, _| r.random_range(-extent..extent))).collect()
}

fn grid(n: usize, spacing: f64, z: f64) -> Vec<Vector3<f64>> {
    (0..n * n).map(|k| Vector3::new((k / n) as f64 * spacing, (k % n) as f64 * spacing, z)).collect()
}

fn trajectory(poses: &[Pose]) -> Trajectory {
    Trajectory::new(poses.iter().enumerate().map(|(i, p)| (i as f64 * 0.1, *p)).collect()).unwrap()
}

#[test]
fn accuracy_and_chamfer_match_brute_force() {
    let cfg = MetricConfig::default();
    for seed in 0..20 {
        let mut r = support::rng(seed);
        let p = random_cloud(&mut r, 200, 1.5);
        let q: Vec<Vector3<f64>> = random_cloud(&mut r, 200, 1.5);
        let (pc, qc) = (PointCloud::from(p.clone()), PointCloud::from(q.clone()));

        let got = accuracy(&pc, &qc, &cfg).unwrap();
        let (ac, frac) = support::brute_accuracy(&p, &q, cfg.knn_distance, cfg.inlier_threshold);
        assert!((got.ac - ac).abs() < 1e-12);
        assert!((got.inlier_fraction - frac).abs() < 1e-12);

        let cd = chamfer(&pc, &qc).unwrap();
        assert!((cd - support::brute_chamfer(&p, &q)).abs() < 1e-12);
        assert_eq!(cd, chamfer(&qc, &pc).unwrap());
    }
}

#[test]
fn chamfer_closed_forms() {
    let a = PointCloud::from(vec![Vector3::new(1.0, 2.0, 3.0)]);
    let b = PointCloud::from(vec![Vector3::new(1.0, 2.0, 3.7)]);
    assert!((chamfer(&a, &b).unwrap() - 1.4).abs() < 1e-12);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    assert!(chamfer(&a, &PointCloud::default()).is_err());
}

#[test]
fn accuracy_examples() {
    let cfg = MetricConfig::default();
    let truth = PointCloud::from(grid(30, 0.05, 0.0));
    let same = accuracy(&truth, &truth, &cfg).unwrap();
    assert_eq!((same.ac, same.inlier_fraction), (0.0, 1.0));

    let lifted = PointCloud::from(grid(30, 0.05, 0.3));
    let a = accuracy(&lifted, &truth, &cfg).unwrap();
    assert!((a.ac - 0.3).abs() < 1e-6 && a.inlier_fraction == 1.0);

    let mut half = grid(30, 0.05, 0.3);
    for p in half.iter_mut().skip(450) {
        p.z = 0.6;
    }
    let half_pts = half.clone();
    let got = accuracy(&PointCloud::from(half), &truth, &cfg).unwrap();
    let (ac, frac) = support::brute_accuracy(&half_pts, &truth.points, cfg.knn_distance, cfg.inlier_threshold);
    assert!((got.ac - 0.3).abs() < 1e-6 && (got.inlier_fraction - 0.5).abs() < 1e-12);
    assert!((got.ac - ac).abs() < 1e-12 && frac == 0.5);

    let far = PointCloud::from(grid(5, 0.05, 0.8));
    assert_eq!(accuracy(&far, &truth, &cfg), Err(MetricError::NoInliers));
}

#[test]
fn ate_alignment_and_offsets() {
    let mut r = support::rng(2);
    let truth: Vec<Pose> = (0..200).map(|_| support::random_pose(&mut r, 1.0, 10.0)).collect();
    let est: Vec<Pose> = truth.iter().map(|p| Pose::new(p.rotation, p.translation + support::gaussian3(&mut r) * 0.05)).collect();
    let cfg = MetricConfig::default();
    let t = trajectory(&truth);
    assert!(ate(&t, &t, &cfg).unwrap() < 1e-12);

    let base = ate(&trajectory(&est), &t, &cfg).unwrap();
    let rigid = Pose::new(Rotation::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8).normalize(), 1.1), Vector3::new(4.0, -2.0, 7.0));
    let moved = trajectory(&est).transformed(&rigid);
    assert!((ate(&moved, &t, &cfg).unwrap() - base).abs() < 1e-9);

    let offset = Vector3::new(0.3, -0.4, 1.2);
    let shifted = trajectory(&truth).transformed(&Pose::from_translation(offset));
    assert!(ate(&shifted, &t, &cfg).unwrap() < 1e-9);
    let raw = MetricConfig { align: false, ..cfg };
    assert!((ate(&shifted, &t, &raw).unwrap() - offset.norm()).abs() < 1e-9);
}

#[test]
fn ate_of_isotropic_noise() {
    let mut r = support::rng(3);
    let sigma = 0.1;
    let truth: Vec<Pose> = (0..10_000).map(|i| Pose::from_translation(Vector3::new(i as f64 * 0.01, 0.0, 0.0))).collect();
    let est: Vec<Pose> = truth.iter().map(|p| Pose::from_translation(p.translation + support::gaussian3(&mut r) * sigma)).collect();
    let cfg = MetricConfig { align: false, ..MetricConfig::default() };
    let got = ate(&trajectory(&est), &trajectory(&truth), &cfg).unwrap();
    assert!((got / (sigma * 3f64.sqrt()) - 1.0).abs() < 0.1, "{got}");
}

#[test]
fn ate_needs_associations() {
    let a = trajectory(&[Pose::identity(), Pose::identity()]);
    let b = Trajectory::new(vec![(100.0, Pose::identity()), (101.0, Pose::identity())]).unwrap();
    assert_eq!(ate(&a, &b, &MetricConfig::default()), Err(MetricError::Association(0)));
    assert!(Trajectory::new(vec![(1.0, Pose::identity()), (1.0, Pose::identity())]).is_err());
}

fn blob(sigma: f64, n: usize, seed: u64) -> PointCloud {
    let mut r = support::rng(seed);
    PointCloud::from((0..n).map(|_| support::gaussian3(&mut r) * sigma).collect::<Vec<_>>())
}

#[test]
fn entropy_of_a_gaussian_blob() {
    let sigma: f64 = 0.05;
    let analytic = 0.5 * ((2.0 * PI * E).powi(3) * sigma.powi(6)).ln();
    let cfg = MetricConfig { mme_radius: 10.0, ..MetricConfig::default() };
    let got = mme(&blob(sigma, 2000, 1), &cfg).unwrap();
    assert!((got.mme - analytic).abs() < 0.15, "{} vs {analytic}", got.mme);
    assert_eq!(got.valid_fraction, 1.0);

    let tighter = mme(&blob(sigma / 2.0, 2000, 1), &cfg).unwrap();
    assert!(tighter.mme < got.mme);
}

#[test]
fn entropy_rejects_planes_and_sparse_clouds() {
    let cfg = MetricConfig::default();
    assert_eq!(mme(&PointCloud::from(grid(20, 0.02, 0.0)), &cfg), Err(MetricError::NoValidPoints));
    assert_eq!(mme(&PointCloud::from(grid(5, 1.0, 0.0)), &cfg), Err(MetricError::NoValidPoints));
    let defaults = MetricConfig::default();
    assert_eq!((defaults.knn_distance, defaults.inlier_threshold, defaults.mme_min_neighbors), (1.0, 0.5, 10));
    assert_eq!((MetricConfig::indoor().mme_radius, MetricConfig::outdoor().mme_radius), (0.1, 0.2));
}
