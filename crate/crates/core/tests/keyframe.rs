use msmap::gmm::{map_w2, VoxelMap, W2Options};
use msmap::keyframe::{decide_radius, KeyframeConfig, KeyframeMode, KeyframeSelector};
use msmap::se3::{Pose, Rotation};
use msmap::sim::{generate_session, Scene, SessionSpec, Simulated};
use nalgebra::Vector3;

fn replay(sim: &Simulated, cfg: KeyframeConfig) -> KeyframeSelector {
    let mut sel = KeyframeSelector::new(cfg).unwrap();
    for f in &sim.session.frames {
        sel.decide(&f.cloud.points, &sim.session.world_pose(f));
    }
    sel
}

fn reference(seed: u64) -> Simulated {
    generate_session(&Scene::two_rooms(), &SessionSpec::two_rooms_reference(seed)).unwrap()
}

#[test]
fn ratio_is_non_increasing_in_tau() {
    let sim = reference(7);
    let mut last = f64::INFINITY;
    for tau in [0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 1.2] {
        let sel = replay(&sim, KeyframeConfig { tau, ..KeyframeConfig::with_voxel_size(4.0, 100.0) });
        let kf = sel.history().iter().filter(|r| r.decision.is_keyframe).count();
        let ratio = kf as f64 / sim.session.len() as f64;
        assert!(ratio <= last, "tau {tau}: {ratio} > {last}");
        last = ratio;
    }
    assert!(last > 0.0, "bootstrap frame is always a keyframe");
}

#[test]
fn replay_is_deterministic() {
    let sim = reference(3);
    let cfg = KeyframeConfig { tau: 0.05, ..KeyframeConfig::with_voxel_size(2.0, 100.0) };
    assert_eq!(replay(&sim, cfg).history(), replay(&sim, cfg).history());
}

#[test]
fn reinserted_stationary_frame_is_not_a_keyframe() {
    let sim = reference(1);
    let cfg = KeyframeConfig::with_voxel_size(2.0, 100.0);
    let mut sel = KeyframeSelector::new(cfg).unwrap();
    let f = &sim.session.frames[0];
    let pose = sim.session.world_pose(f);
    assert!(sel.decide(&f.cloud.points, &pose).is_keyframe);
    let again = sel.decide(&f.cloud.points, &pose);
    assert!(!again.is_keyframe);
    assert!(again.distance < 0.1 * cfg.tau, "{}", again.distance);
}

#[test]
fn displaced_frame_in_corridor_fires() {
    let scene = Scene::two_rooms();
    let spec = SessionSpec {
        waypoints: SessionSpec::two_rooms_reference(0).waypoints[4..7].to_vec(),
        point_noise: 0.0,
        drift_rot: 0.0,
        drift_trans: 0.0,
        ..SessionSpec::two_rooms_reference(0)
    };
    let sim = generate_session(&scene, &spec).unwrap();
    // Re-inserting n points displaced by s moves each voxel mean by about s/2, so
    // b = 1 needs tau small against the voxel size (few points change voxel).
    let cfg = KeyframeConfig { tau: 0.05, ..KeyframeConfig::with_voxel_size(2.0, 100.0) };
    let k = sim.session.len() / 2;
    let f = &sim.session.frames[k];
    let pose = sim.truth[k];
    let shifted = Pose::from_translation(Vector3::new(2.0 * cfg.tau, 0.0, 0.0)) * pose;

    let mut sel = KeyframeSelector::new(cfg).unwrap();
    sel.decide(&f.cloud.points, &pose);
    let d = sel.decide(&f.cloud.points, &shifted);

    let mut map = VoxelMap::new(cfg.voxel_size, cfg.map_radius).unwrap();
    map.insert_points(&f.cloud.points.iter().map(|p| pose.transform_point(p)).collect::<Vec<_>>());
    let (touched, snap) = map.insert_with_snapshot(&f.cloud.points.iter().map(|p| shifted.transform_point(p)).collect::<Vec<_>>());
    let direct = map_w2(&snap, &map, &touched, &W2Options::default());

    assert!((d.distance - direct.mean).abs() < 1e-12);
    assert!(d.is_keyframe, "d_w = {} <= tau = {}", d.distance, cfg.tau);
}

#[test]
fn radius_gate_examples() {
    let cfg = KeyframeConfig { mode: KeyframeMode::Radius, d_t: 0.1, d_r: 0.1, ..KeyframeConfig::default() };
    let p = Pose::identity();
    assert!(!decide_radius(&p, &p, &cfg).is_keyframe);
    assert!(decide_radius(&Pose::from_translation(Vector3::new(0.2, 0.0, 0.0)), &p, &cfg).is_keyframe);
    assert!(!decide_radius(&Pose::new(Rotation::yaw(0.05), Vector3::zeros()), &p, &cfg).is_keyframe);
}
