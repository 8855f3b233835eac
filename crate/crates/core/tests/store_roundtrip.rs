mod support;

use std::path::Path;

use msmap::cloud::PointCloud;
use msmap::keyframe::{DecisionRecord, KeyframeDecision};
use msmap::metrics::Trajectory;
use msmap::pipeline::PipelineConfig;
use msmap::se3::{Pose, TangentCovariance};
use msmap::session::{Frame, Session};
use msmap::sim::{Scene, SessionSpec};
use msmap::store::{self, Report};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

fn close(a: &Pose, b: &Pose) -> bool {
    let (dt, dr) = Pose::distance(a, b);
    dt < 1e-12 && dr < 1e-12
}

fn random_session(seed: u64, frames: usize) -> Session {
    let mut r = support::rng(seed);
    let mut s = Session::new(r.random_range(0..5), support::random_pose(&mut r, 3.0, 50.0));
    for k in 0..frames {
        let cloud: Vec<Vector3<f64>> = (0..r.random_range(0..30)).map(|_| support::gaussian3(&mut r) * 7.3).collect();
        s.frames.push(Frame {
            session: s.id,
            index: k as u32,
            timestamp: k as f64 * 0.1 + r.random_range(0.0..0.05),
            pose: support::random_pose(&mut r, 3.0, 100.0),
            covariance: support::random_covariance6(&mut r, 0.3),
            keyframe: r.random_bool(0.3),
            cloud: PointCloud::new(cloud),
        });
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn session_round_trip(seed in any::<u64>(), frames in 0usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let s = random_session(seed, frames);
        store::save_session(dir.path(), &s).unwrap();
        let back = store::load_session(dir.path()).unwrap();
        prop_assert_eq!(back.id, s.id);
        prop_assert!(close(&back.init, &s.init));
        prop_assert_eq!(back.frames.len(), s.frames.len());
        for (a, b) in back.frames.iter().zip(&s.frames) {
            prop_assert_eq!((a.session, a.index, a.keyframe), (b.session, b.index, b.keyframe));
            prop_assert!((a.timestamp - b.timestamp).abs() < 1e-12);
            prop_assert!(close(&a.pose, &b.pose));
            prop_assert!((a.covariance.matrix() - b.covariance.matrix()).amax() < 1e-12);
            prop_assert_eq!(a.cloud.len(), b.cloud.len());
            for (p, q) in a.cloud.points.iter().zip(&b.cloud.points) {
                prop_assert!((p - q).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_round_trip(seed in any::<u64>()) {
        let s = random_session(seed, 5);
        let mut r = support::rng(seed ^ 1);
        let mut g = msmap::graph::PoseGraph::new(msmap::graph::NoiseModel::Upgo);
        let id = |k: usize| msmap::graph::NodeId::new(s.id, k as u32);
        for (k, f) in s.frames.iter().enumerate() {
            g.add_node(id(k), f.pose).unwrap();
        }
        if !s.frames.is_empty() {
            g.add_prior(id(0), Pose::identity(), &support::random_covariance6(&mut r, 0.1)).unwrap();
        }
        for k in 1..s.frames.len() {
            g.add_odometry(id(k - 1), id(k), support::random_pose(&mut r, 0.2, 1.0), &support::random_covariance6(&mut r, 0.1)).unwrap();
        }
        let text = store::graph_text(&g);
        let back = store::parse_graph(&text, Path::new("g.g2o")).unwrap();
        let (c0, c1) = (g.cost().unwrap(), back.cost().unwrap());
        prop_assert!((c0 - c1).abs() <= 1e-9 * c0.max(1.0));
        prop_assert_eq!(back.factors().len(), g.factors().len());
        for ((ia, a), (ib, b)) in g.nodes().iter().zip(back.nodes()) {
            prop_assert_eq!(ia, ib);
            prop_assert!(close(a, b));
        }
        for (a, b) in g.factors().iter().zip(back.factors()) {
            prop_assert_eq!((a.kind, a.nodes), (b.kind, b.nodes));
            prop_assert!(close(&a.measurement, &b.measurement));
            prop_assert!((a.information - b.information).amax() <= 1e-12 * a.information.amax());
        }
    }
}

#[test]
fn trajectory_report_decisions_round_trip() {
    let mut r = support::rng(3);
    let traj = Trajectory::new((0..20).map(|k| (k as f64 * 0.5, support::random_pose(&mut r, 3.0, 30.0))).collect()).unwrap();
    let back = store::parse_trajectory(&store::trajectory_text(&traj), Path::new("t.txt")).unwrap();
    for ((ta, a), (tb, b)) in traj.samples().iter().zip(back.samples()) {
        assert_eq!(ta, tb);
        assert!(close(a, b));
    }

    let mut report = Report::default();
    report.push_f64("ate_m", 0.1 + 0.2);
    report.push("mode", "upgo");
    let back = Report::parse(&report.to_text(), Path::new("r.txt")).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.get_f64("ate_m"), Some(0.1 + 0.2));

    let records: Vec<DecisionRecord> = (0..10)
        .map(|k| DecisionRecord {
            frame: k,
            decision: KeyframeDecision { distance: r.random_range(0.0..2.0), is_keyframe: k % 3 == 0, touched: k * 7, eligible: k * 5, voxel_count: 100 + k },
        })
        .collect();
    let back = store::parse_decisions(&store::decisions_text(&records), Path::new("d.txt")).unwrap();
    assert_eq!(back, records);
}

#[test]
fn config_scene_and_spec_text_round_trip() {
    let cfg = PipelineConfig::parse("mode=fpgo\nseed=9\nkeyframe.voxel_size=2.5\nfpgo.loop_trans=0.01\n").unwrap();
    assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(PipelineConfig::parse(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());

    let scene = Scene::two_rooms();
    assert_eq!(Scene::parse(&scene.to_text()).unwrap().patches(), scene.patches());
    let spec = SessionSpec::two_rooms_revisit(77);
    assert_eq!(SessionSpec::parse(&spec.to_text()).unwrap(), spec);
}

#[test]
fn malformed_inputs_name_the_line() {
    let err = store::parse_trajectory("0 0 0 0 0 0 0 1\n1 0 0\n", Path::new("t.txt")).unwrap_err();
    assert!(err.to_string().contains("t.txt") && err.to_string().contains('2'), "{err}");
    let err = Report::parse("a=1\nnonsense\n", Path::new("r.txt")).unwrap_err();
    assert!(err.to_string().contains('2'));
    assert!(PipelineConfig::parse("bogus=1\n").is_err());
    let _ = TangentCovariance::zero();
}
