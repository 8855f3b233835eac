//! Deterministic synthetic sessions.
//!
//! A [`Scene`] is a set of planar patches sampled on a fixed grid. A
//! [`SessionSpec`] drives a sensor along waypoints; each frame records the
//! scene points within range of the true pose, thinned with distance and expressed in the body frame with Gaussian range noise, plus
//! a drifting odometry pose and its covariance.
//!
//! Odometry increments are perturbed in the body frame, `Δ̂ = Δ · exp(w)` with
//! `w ~ N(0, Q·dt)`, and the covariance follows
//! `Σ_{k+1} = Ad(Δ̂⁻¹) Σ_k Ad(Δ̂⁻¹)ᵀ + Q·dt`.
//!
//! Randomness comes from ChaCha8 seeded by the spec: stream 0 drives drift,
//! stream `k + 1` the noise of frame `k`, and the last stream the initial
//! guess perturbation.

use std::fmt::Write as _;

use nalgebra::{Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cloud::PointCloud;
use crate::metrics::Trajectory;
use crate::se3::{transform_covariance, Pose, Rotation, TangentCovariance, Twist};
use crate::session::{Frame, Session};
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("session spec has no waypoints")]
    NoWaypoints,
    #[error("invalid patch: {0}")]
    Patch(String),
    #[error("scene needs at least 3 patches with linearly independent normals")]
    DegenerateScene,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("parameter {name} = {value} is out of range")]
    Parameter { name: &'static str, value: f64 },
    #[error("sessions share no waypoint region")]
    NoOverlap,
}

/// Parallelogram `corner + a·u + b·v`, `a, b ∈ [0, 1]`, sampled at `density` points/m².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub corner: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub density: f64,
}

impl Patch {
    pub fn new(corner: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, density: f64) -> Result<Self, SimError> {
        if !(density > 0.0 && density.is_finite()) {
            return Err(SimError::Patch(format!("density {density} must be positive")));
        }
        if !(u.cross(&v).norm() > 1e-9) || !(corner.iter().chain(u.iter()).chain(v.iter()).all(|x| x.is_finite())) {
            return Err(SimError::Patch("edges must be finite and non-parallel".into()));
        }
        Ok(Self { corner, u, v, density })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v).normalize()
    }

    /// Cell-centred grid with spacing about `1/√density`.
    pub fn sample(&self) -> Vec<Vector3<f64>> {
        let step = 1.0 / self.density.sqrt();
        let nu = (self.u.norm() / step).ceil().max(1.0) as usize;
        let nv = (self.v.norm() / step).ceil().max(1.0) as usize;
        let mut out = Vec::with_capacity(nu * nv);
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + 0.5) / nu as f64;
                let b = (j as f64 + 0.5) / nv as f64;
                out.push(self.corner + self.u * a + self.v * b);
            }
        }
        out
    }

    /// Whether `p` lies on the patch within `tol` meters.
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let n = self.normal();
        let d = p - self.corner;
        if d.dot(&n).abs() > tol {
            return false;
        }
        let (uu, uv, vv) = (self.u.dot(&self.u), self.u.dot(&self.v), self.v.dot(&self.v));
        let (du, dv) = (d.dot(&self.u), d.dot(&self.v));
        let det = uu * vv - uv * uv;
        let a = (du * vv - dv * uv) / det;
        let b = (dv * uu - du * uv) / det;
        let (eu, ev) = (tol / self.u.norm(), tol / self.v.norm());
        (-eu..=1.0 + eu).contains(&a) && (-ev..=1.0 + ev).contains(&b)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    patches: Vec<Patch>,
    points: Vec<Vector3<f64>>,
    tree: KdTree,
}

impl PartialEq for Scene {
    fn eq(&self, other: &Self) -> bool {
        self.patches == other.patches
    }
}

impl Scene {
    pub fn new(patches: Vec<Patch>) -> Result<Self, SimError> {
        if patches.is_empty() {
            return Err(SimError::Patch("scene has no patches".into()));
        }
        let points: Vec<Vector3<f64>> = patches.iter().flat_map(Patch::sample).collect();
        let tree = KdTree::build(&points);
        Ok(Self { patches, points, tree })
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    /// Noise-free sampled scene points.
    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn point_cloud(&self) -> PointCloud {
        PointCloud::new(self.points.clone())
    }

    /// Requires at least three patches whose normals span R³.
    pub fn check_conditioning(&self) -> Result<(), SimError> {
        let scatter = self.patches.iter().fold(nalgebra::Matrix3::zeros(), |acc, p| {
            let n = p.normal();
            acc + n * n.transpose()
        });
        let min_eig = scatter.symmetric_eigenvalues().min();
        if self.patches.len() < 3 || min_eig < 1e-6 { Err(SimError::DegenerateScene) } else { Ok(()) }
    }

    pub fn on_surface(&self, p: &Vector3<f64>, tol: f64) -> bool {
        self.patches.iter().any(|patch| patch.contains(p, tol))
    }

    /// `patch cx cy cz ux uy uz vx vy vz density` per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut patches = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SimError::Parse { line: i + 1, message };
            let mut f = line.split_whitespace();
            if f.next() != Some("patch") {
                return Err(err(format!("expected 'patch', got '{line}'")));
            }
            let v: Vec<f64> = f.map(str::parse).collect::<Result<_, _>>().map_err(|e| err(format!("{e}")))?;
            if v.len() != 10 {
                return Err(err(format!("expected 10 numbers, got {}", v.len())));
            }
            let p = Patch::new(
                Vector3::new(v[0], v[1], v[2]),
                Vector3::new(v[3], v[4], v[5]),
                Vector3::new(v[6], v[7], v[8]),
                v[9],
            )
            .map_err(|e| err(e.to_string()))?;
            patches.push(p);
        }
        Scene::new(patches)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# patch cx cy cz ux uy uz vx vy vz density\n");
        for p in &self.patches {
            let c = [p.corner, p.u, p.v];
            let nums: Vec<String> = c.iter().flat_map(|v| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>()).collect();
            let _ = writeln!(s, "patch {} {}", nums.join(" "), p.density);
        }
        s
    }

    /// Two 20 m × 20 m rooms joined by a 20 m × 4 m corridor, with pillars.
    pub fn two_rooms() -> Self {
        let (floor_d, wall_d, pillar_d, h) = (8.0, 12.0, 25.0, 3.0);
        let mut p = Vec::new();
        let mut floor = |x0: f64, y0: f64, x1: f64, y1: f64| {
            p.push(Patch { corner: Vector3::new(x0, y0, 0.0), u: Vector3::new(x1 - x0, 0.0, 0.0), v: Vector3::new(0.0, y1 - y0, 0.0), density: floor_d });
        };
        floor(0.0, 0.0, 20.0, 20.0);
        floor(20.0, 8.0, 40.0, 12.0);
        floor(40.0, 0.0, 60.0, 20.0);
        let walls = [
            (0.0, 0.0, 0.0, 20.0),
            (0.0, 0.0, 20.0, 0.0),
            (0.0, 20.0, 20.0, 20.0),
            (20.0, 0.0, 20.0, 8.0),
            (20.0, 12.0, 20.0, 20.0),
            (20.0, 8.0, 40.0, 8.0),
            (20.0, 12.0, 40.0, 12.0),
            (40.0, 0.0, 40.0, 8.0),
            (40.0, 12.0, 40.0, 20.0),
            (60.0, 0.0, 60.0, 20.0),
            (40.0, 0.0, 60.0, 0.0),
            (40.0, 20.0, 60.0, 20.0),
        ];
        for (x0, y0, x1, y1) in walls {
            p.push(wall(x0, y0, x1, y1, h, wall_d));
        }
        let pillars = [
            (5.0, 5.0, 1.0, 1.0, h),
            (14.0, 5.5, 0.6, 1.4, h),
            (5.5, 14.0, 1.4, 0.6, h),
            (14.5, 14.5, 1.0, 1.0, 2.0),
            (25.0, 11.5, 0.6, 0.5, 1.5),
            (30.0, 8.4, 0.4, 0.8, 1.2),
            (35.0, 11.6, 0.8, 0.4, 2.0),
            (45.0, 5.0, 1.2, 0.8, h),
            (54.0, 6.0, 1.0, 1.0, 1.5),
            (46.0, 15.0, 0.7, 0.7, h),
            (55.0, 14.5, 1.5, 1.0, h),
        ];
        for (cx, cy, sx, sy, ph) in pillars {
            add_box(&mut p, Vector3::new(cx - sx / 2.0, cy - sy / 2.0, 0.0), Vector3::new(cx + sx / 2.0, cy + sy / 2.0, ph), pillar_d);
        }
        for patch in &mut p {
            patch.corner += TWO_ROOMS_ORIGIN;
        }
        Scene::new(p).expect("preset scene is valid")
    }
}

/// Offset of the two-room preset, so its faces avoid voxel boundaries for
/// the usual power-of-two voxel sizes.
pub const TWO_ROOMS_ORIGIN: Vector3<f64> = Vector3::new(0.13, 0.27, 0.11);

fn wall(x0: f64, y0: f64, x1: f64, y1: f64, height: f64, density: f64) -> Patch {
    Patch { corner: Vector3::new(x0, y0, 0.0), u: Vector3::new(x1 - x0, y1 - y0, 0.0), v: Vector3::new(0.0, 0.0, height), density }
}

/// Four vertical faces and the top of an axis-aligned box.
pub fn add_box(patches: &mut Vec<Patch>, min: Vector3<f64>, max: Vector3<f64>, density: f64) {
    let h = max.z - min.z;
    patches.push(wall(min.x, min.y, max.x, min.y, h, density));
    patches.push(wall(max.x, min.y, max.x, max.y, h, density));
    patches.push(wall(max.x, max.y, min.x, max.y, h, density));
    patches.push(wall(min.x, max.y, min.x, min.y, h, density));
    patches.push(Patch {
        corner: Vector3::new(min.x, min.y, max.z),
        u: Vector3::new(max.x - min.x, 0.0, 0.0),
        v: Vector3::new(0.0, max.y - min.y, 0.0),
        density,
    });
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Vector3<f64>,
    /// Seconds spent stationary on arrival.
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSpec {
    pub session_id: u32,
    pub seed: u64,
    pub waypoints: Vec<Waypoint>,
    /// m/s
    pub speed: f64,
    /// Hz
    pub scan_rate: f64,
    pub scan_range: f64,
    pub min_range: f64,
    /// Points beyond this range are kept with probability `(falloff_range / r)²`.
    pub falloff_range: f64,
    /// Range noise standard deviation, meters.
    pub point_noise: f64,
    /// rad/√s
    pub drift_rot: f64,
    /// m/√s
    pub drift_trans: f64,
    /// Standard deviations of the initial odometry covariance.
    pub init_sigma_rot: f64,
    pub init_sigma_trans: f64,
    /// Magnitudes of the perturbation applied to the true initial pose.
    pub init_noise_rot: f64,
    pub init_noise_trans: f64,
    pub start_time: f64,
    /// Seconds over which heading blends into each new segment.
    pub turn_time: f64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            session_id: 0,
            seed: 0,
            waypoints: Vec::new(),
            speed: 1.0,
            scan_rate: 1.0,
            scan_range: 10.0,
            min_range: 0.5,
            falloff_range: 4.0,
            point_noise: 0.02,
            drift_rot: 1e-3,
            drift_trans: 1e-2,
            init_sigma_rot: 1e-4,
            init_sigma_trans: 1e-3,
            init_noise_rot: 0.0,
            init_noise_trans: 0.0,
            start_time: 0.0,
            turn_time: 2.0,
        }
    }
}

fn waypoints(list: &[[f64; 2]], z: f64) -> Vec<Waypoint> {
    list.iter().map(|p| Waypoint { position: Vector3::new(p[0], p[1], z) + TWO_ROOMS_ORIGIN, dwell: 0.0 }).collect()
}

impl SessionSpec {
    /// Low-drift survey of both rooms and the corridor in [`Scene::two_rooms`].
    pub fn two_rooms_reference(seed: u64) -> Self {
        let path = [
            [3.0, 3.0], [17.0, 3.0], [17.0, 17.0], [3.0, 17.0], [3.0, 10.0], [30.0, 10.0],
            [43.0, 10.0], [43.0, 3.0], [57.0, 3.0], [57.0, 17.0], [43.0, 17.0], [43.0, 10.5],
        ];
        Self { session_id: 0, seed, waypoints: waypoints(&path, 1.0), drift_rot: 5e-5, drift_trans: 1e-3, ..Self::default() }
    }

    /// High-drift revisit starting and ending in the first room, with an
    /// imperfect initial guess.
    pub fn two_rooms_revisit(seed: u64) -> Self {
        let path = [
            [10.0, 7.0], [16.0, 8.0], [18.0, 10.0], [38.0, 10.0], [47.0, 10.0], [54.0, 5.0],
            [55.0, 14.0], [45.0, 15.0], [41.0, 10.0], [21.0, 10.5], [10.0, 13.0], [6.0, 9.0],
        ];
        Self {
            session_id: 1,
            seed,
            waypoints: waypoints(&path, 1.2),
            drift_rot: 2e-3,
            drift_trans: 2e-2,
            init_noise_rot: 0.05,
            init_noise_trans: 0.5,
            start_time: 10_000.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.is_empty() {
            return Err(SimError::NoWaypoints);
        }
        let positive = [("speed", self.speed), ("scan_rate", self.scan_rate), ("scan_range", self.scan_range), ("turn_time", self.turn_time), ("falloff_range", self.falloff_range)];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SimError::Parameter { name, value });
            }
        }
        let non_negative = [
            ("min_range", self.min_range),
            ("falloff_range", self.falloff_range),
            ("point_noise", self.point_noise),
            ("drift_rot", self.drift_rot),
            ("drift_trans", self.drift_trans),
            ("init_noise_rot", self.init_noise_rot),
            ("init_noise_trans", self.init_noise_trans),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(SimError::Parameter { name, value });
            }
        }
        for (name, value) in [("init_sigma_rot", self.init_sigma_rot), ("init_sigma_trans", self.init_sigma_trans)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SimError::Parameter { name, value });
            }
        }
        if !self.start_time.is_finite() {
            return Err(SimError::Parameter { name: "start_time", value: self.start_time });
        }
        Ok(())
    }

    /// Line-oriented `key=value`; `waypoint=x y z [dwell]` may repeat.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut spec = SessionSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SimError::Parse { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "session_id" => spec.session_id = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "seed" => spec.seed = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "waypoint" => {
                    let v: Vec<f64> = value.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|e| err(format!("{key}: {e}")))?;
                    if !(v.len() == 3 || v.len() == 4) {
                        return Err(err("waypoint needs x y z [dwell]".into()));
                    }
                    spec.waypoints.push(Waypoint { position: Vector3::new(v[0], v[1], v[2]), dwell: v.get(3).copied().unwrap_or(0.0) });
                }
                "speed" => spec.speed = num()?,
                "scan_rate" => spec.scan_rate = num()?,
                "scan_range" => spec.scan_range = num()?,
                "min_range" => spec.min_range = num()?,
                "falloff_range" => spec.falloff_range = num()?,
                "point_noise" => spec.point_noise = num()?,
                "drift_rot" => spec.drift_rot = num()?,
                "drift_trans" => spec.drift_trans = num()?,
                "init_sigma_rot" => spec.init_sigma_rot = num()?,
                "init_sigma_trans" => spec.init_sigma_trans = num()?,
                "init_noise_rot" => spec.init_noise_rot = num()?,
                "init_noise_trans" => spec.init_noise_trans = num()?,
                "start_time" => spec.start_time = num()?,
                "turn_time" => spec.turn_time = num()?,
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "session_id={}", self.session_id);
        let _ = writeln!(s, "seed={}", self.seed);
        for w in &self.waypoints {
            let p = w.position;
            let _ = writeln!(s, "waypoint={} {} {} {}", p.x, p.y, p.z, w.dwell);
        }
        let fields = [
            ("speed", self.speed),
            ("scan_rate", self.scan_rate),
            ("scan_range", self.scan_range),
            ("min_range", self.min_range),
            ("falloff_range", self.falloff_range),
            ("point_noise", self.point_noise),
            ("drift_rot", self.drift_rot),
            ("drift_trans", self.drift_trans),
            ("init_sigma_rot", self.init_sigma_rot),
            ("init_sigma_trans", self.init_sigma_trans),
            ("init_noise_rot", self.init_noise_rot),
            ("init_noise_trans", self.init_noise_trans),
            ("start_time", self.start_time),
            ("turn_time", self.turn_time),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// True sensor poses at the scan times, `(timestamp, pose)`.
    pub fn true_trajectory(&self) -> Result<Vec<(f64, Pose)>, SimError> {
        self.validate()?;
        let legs = self.legs();
        let total: f64 = legs.iter().map(|l| l.duration).sum();
        let dt = 1.0 / self.scan_rate;
        let count = (total / dt + 1e-9).floor() as usize + 1;
        let mut out = Vec::with_capacity(count);
        let mut leg = 0;
        let mut leg_start = 0.0;
        for k in 0..count {
            let t = k as f64 * dt;
            while leg + 1 < legs.len() && t >= leg_start + legs[leg].duration {
                leg_start += legs[leg].duration;
                leg += 1;
            }
            let l = &legs[leg];
            let tau = (t - leg_start).clamp(0.0, l.duration);
            let frac = if l.duration > 0.0 { tau / l.duration } else { 1.0 };
            let position = l.from + (l.to - l.from) * frac;
            let blend = (tau / self.turn_time.min(l.duration.max(f64::MIN_POSITIVE))).min(1.0);
            let yaw = l.yaw_from + wrap_angle(l.yaw - l.yaw_from) * blend;
            out.push((self.start_time + t, Pose::new(Rotation::yaw(yaw), position)));
        }
        Ok(out)
    }

    fn legs(&self) -> Vec<Leg> {
        let w = &self.waypoints;
        let yaw_of = |a: &Vector3<f64>, b: &Vector3<f64>| {
            let d = b - a;
            (d.x.hypot(d.y) > 1e-9).then(|| d.y.atan2(d.x))
        };
        let first_yaw = w.windows(2).find_map(|p| yaw_of(&p[0].position, &p[1].position)).unwrap_or(0.0);
        let mut yaw = first_yaw;
        let mut legs = Vec::new();
        for (i, wp) in w.iter().enumerate() {
            if wp.dwell > 0.0 {
                legs.push(Leg { from: wp.position, to: wp.position, yaw_from: yaw, yaw, duration: wp.dwell });
            }
            if let Some(next) = w.get(i + 1) {
                let new_yaw = yaw_of(&wp.position, &next.position).unwrap_or(yaw);
                let duration = (next.position - wp.position).norm() / self.speed;
                legs.push(Leg { from: wp.position, to: next.position, yaw_from: yaw, yaw: new_yaw, duration });
                yaw = new_yaw;
            }
        }
        if legs.is_empty() {
            legs.push(Leg { from: w[0].position, to: w[0].position, yaw_from: yaw, yaw, duration: 0.0 });
        }
        legs
    }
}

#[derive(Debug, Clone, Copy)]
struct Leg {
    from: Vector3<f64>,
    to: Vector3<f64>,
    yaw_from: f64,
    yaw: f64,
    duration: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI { r + two_pi } else { r }
}

/// Generated session with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub session: Session,
    /// True world pose of each frame.
    pub truth: Vec<Pose>,
    /// True world pose of the session frame.
    pub true_init: Pose,
}

impl Simulated {
    pub fn truth_trajectory(&self) -> Trajectory {
        let samples = self.session.frames.iter().zip(&self.truth).map(|(f, p)| (f.timestamp, *p)).collect();
        Trajectory::new(samples).expect("simulated timestamps increase")
    }

    /// Odometry poses mapped through the session's `init`.
    pub fn odometry_trajectory(&self) -> Trajectory {
        let s = &self.session;
        Trajectory::new(s.frames.iter().map(|f| (f.timestamp, s.world_pose(f))).collect()).expect("simulated timestamps increase")
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian3(r: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal))
}

fn unit3(r: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = gaussian3(r);
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Fixed value in `[0, 1)` per scene point, so a static sensor keeps the
/// same subset every frame.
fn point_rank(index: usize) -> f64 {
    let mut z = (index as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Noisy body-frame scan at `pose`. Scene points in range are thinned with
/// distance and perturbed along their ray.
pub fn scan(scene: &Scene, pose: &Pose, spec: &SessionSpec, frame: u64) -> PointCloud {
    let mut r = rng(spec.seed, frame + 1);
    let inv = pose.inverse();
    let mut pts = Vec::new();
    for i in scene.tree.within_radius(&pose.translation, spec.scan_range) {
        let body = inv.transform_point(&scene.points[i]);
        let range = body.norm();
        if range < spec.min_range {
            continue;
        }
        if point_rank(i) >= (spec.falloff_range / range).powi(2) {
            continue;
        }
        let noise: f64 = if spec.point_noise > 0.0 { spec.point_noise * r.sample::<f64, _>(StandardNormal) } else { 0.0 };
        pts.push(body * ((range + noise) / range));
    }
    PointCloud::new(pts)
}

pub fn generate_session(scene: &Scene, spec: &SessionSpec) -> Result<Simulated, SimError> {
    scene.check_conditioning()?;
    let truth_samples = spec.true_trajectory()?;
    let dt = 1.0 / spec.scan_rate;
    let q = Matrix6::from_diagonal(&nalgebra::Vector6::new(
        spec.drift_rot.powi(2),
        spec.drift_rot.powi(2),
        spec.drift_rot.powi(2),
        spec.drift_trans.powi(2),
        spec.drift_trans.powi(2),
        spec.drift_trans.powi(2),
    )) * dt;
    let sd = nalgebra::Vector6::new(spec.drift_rot, spec.drift_rot, spec.drift_rot, spec.drift_trans, spec.drift_trans, spec.drift_trans) * dt.sqrt();

    let mut drift = rng(spec.seed, 0);
    let true_init = truth_samples[0].1;
    let init = if spec.init_noise_rot > 0.0 || spec.init_noise_trans > 0.0 {
        let mut r = rng(spec.seed, u64::MAX);
        let rot = unit3(&mut r) * spec.init_noise_rot;
        let trans = unit3(&mut r) * spec.init_noise_trans;
        true_init * Pose::exp(&Twist::new(rot, trans))
    } else {
        true_init
    };

    let mut session = Session::new(spec.session_id, init);
    let mut pose = Pose::identity();
    let mut cov = TangentCovariance::diagonal(spec.init_sigma_rot.powi(2), spec.init_sigma_trans.powi(2));
    let mut truth = Vec::with_capacity(truth_samples.len());
    for (k, (t, true_pose)) in truth_samples.iter().enumerate() {
        if k > 0 {
            let delta = Pose::between(&truth_samples[k - 1].1, true_pose);
            let w = gaussian3(&mut drift).component_mul(&sd.fixed_rows::<3>(0).into_owned());
            let v = gaussian3(&mut drift).component_mul(&sd.fixed_rows::<3>(3).into_owned());
            let noisy = delta * Pose::exp(&Twist::new(w, v));
            pose = pose * noisy;
            cov = TangentCovariance::symmetrized(transform_covariance(&cov, &noisy.inverse()).matrix() + q);
        }
        truth.push(*true_pose);
        session.frames.push(Frame {
            session: spec.session_id,
            index: k as u32,
            timestamp: *t,
            pose,
            covariance: cov,
            keyframe: false,
            cloud: scan(scene, true_pose, spec, k as u64),
        });
    }
    Ok(Simulated { session, truth, true_init })
}

/// Two sessions over the same scene; the returned pose is session `b`'s
/// initial guess in the frame of session `a`'s map.
pub fn overlap_pair(scene: &Scene, a: &SessionSpec, b: &SessionSpec) -> Result<(Simulated, Simulated, Pose), SimError> {
    let reach = a.scan_range.min(b.scan_range);
    let shares = a.waypoints.iter().any(|wa| b.waypoints.iter().any(|wb| (wa.position - wb.position).norm() <= reach));
    if !shares {
        return Err(SimError::NoOverlap);
    }
    let sa = generate_session(scene, a)?;
    let sb = generate_session(scene, b)?;
    let t_init = sa.session.init.inverse() * sb.session.init;
    Ok((sa, sb, t_init))
}
