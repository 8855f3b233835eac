//! On-disk formats. All files are line-oriented text with floats written to
//! 17 significant digits.
//!
//! * Point clouds: ASCII PLY with `double` x, y, z.
//! * Session manifest (`manifest.txt`): `key=value` header lines followed by
//!   one `frame` row per frame:
//!   `frame <session> <index> <t> <cloud> <tx ty tz qx qy qz qw> <21 cov> <kf>`.
//! * Trajectories: TUM rows `t tx ty tz qx qy qz qw`.
//! * Pose graphs: g2o-style `VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT` lines with the
//!   21 upper-triangular information entries in g2o's `[translation | rotation]`
//!   order. Loops, priors and map priors use `EDGE_SE3_LOOP:QUAT`,
//!   `EDGE_SE3_PRIOR` and `EDGE_SE3_MAP_PRIOR`.
//! * Reports: `key=value`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3};

use crate::cloud::PointCloud;
use crate::graph::{FactorKind, FactorNodes, GraphError, NodeId, NoiseModel, NoiseTable, PoseGraph};
use crate::keyframe::DecisionRecord;
use crate::metrics::Trajectory;
use crate::se3::{from_upper_triangle, upper_triangle, Pose, TangentCovariance};
use crate::session::{Frame, Session};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl StoreError {
    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        StoreError::Parse { path: path.to_path_buf(), line, message: message.into() }
    }
}

pub const MANIFEST: &str = "manifest.txt";
pub const TRUTH: &str = "truth.txt";
pub const TRUTH_MAP: &str = "truth_map.ply";
pub const GRAPH: &str = "graph.g2o";
pub const TRAJECTORY: &str = "trajectory.txt";
pub const MERGED_MAP: &str = "merged_map.ply";
pub const DECISIONS: &str = "decisions.txt";

const NODE_STRIDE: u64 = 1_000_000;

pub fn read_text(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), StoreError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| StoreError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_nums(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.push(' ');
        out.push_str(&num(v));
    }
}

fn parse_floats(fields: &[&str], path: &Path, line: usize) -> Result<Vec<f64>, StoreError> {
    fields.iter().map(|f| f.parse::<f64>().map_err(|e| StoreError::parse(path, line, format!("'{f}': {e}")))).collect()
}

/// `tx ty tz qx qy qz qw`
fn pose_fields(p: &Pose) -> [f64; 7] {
    let q = p.rotation.to_quaternion();
    let t = p.translation;
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

fn pose_from_fields(v: &[f64], path: &Path, line: usize) -> Result<Pose, StoreError> {
    Pose::from_translation_quaternion(Vector3::new(v[0], v[1], v[2]), [v[6], v[3], v[4], v[5]])
        .map_err(|e| StoreError::parse(path, line, e.to_string()))
}

// ---- PLY ----

pub fn ply_text(points: &[Vector3<f64>]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", num(p.x), num(p.y), num(p.z));
    }
    s
}

pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> Result<(), StoreError> {
    write_text(path, &ply_text(points))
}

pub fn parse_ply(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>, StoreError> {
    let mut lines = text.lines().enumerate();
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    let mut last = 0;
    for (i, line) in lines.by_ref() {
        last = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["ply"] if i == 0 => {}
            _ if i == 0 => return Err(StoreError::parse(path, 1, "missing 'ply' magic")),
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(StoreError::parse(path, i + 1, format!("unsupported format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|e| StoreError::parse(path, i + 1, e.to_string()))?);
                } else if n.parse::<usize>().ok() != Some(0) {
                    return Err(StoreError::parse(path, i + 1, format!("unsupported element '{name}'")));
                }
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(StoreError::parse(path, i + 1, format!("unexpected header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(StoreError::parse(path, last + 1, "missing end_header"));
    }
    let count = count.ok_or_else(|| StoreError::parse(path, last, "no vertex element"))?;
    let idx = |n: &str| props.iter().position(|p| p == n);
    let (Some(ix), Some(iy), Some(iz)) = (idx("x"), idx("y"), idx("z")) else {
        return Err(StoreError::parse(path, last, "vertex element lacks x, y, z"));
    };
    let mut pts = Vec::with_capacity(count);
    for (i, line) in lines.by_ref().take(count) {
        last = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != props.len() {
            return Err(StoreError::parse(path, i + 1, format!("expected {} values, got {}", props.len(), f.len())));
        }
        let v = parse_floats(&[f[ix], f[iy], f[iz]], path, i + 1)?;
        pts.push(Vector3::new(v[0], v[1], v[2]));
    }
    if pts.len() < count {
        return Err(StoreError::parse(path, last + 1, format!("truncated: expected {count} vertices, found {}", pts.len())));
    }
    if let Some((i, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(StoreError::parse(path, i + 1, format!("trailing data '{l}'")));
    }
    Ok(pts)
}

pub fn read_ply(path: &Path) -> Result<Vec<Vector3<f64>>, StoreError> {
    parse_ply(&read_text(path)?, path)
}

// ---- sessions ----

fn cloud_name(f: &Frame) -> String {
    format!("clouds/s{}_f{:06}.ply", f.session, f.index)
}

pub fn manifest_text(session: &Session) -> String {
    let mut s = String::from("format=msmap-session 1\n");
    let _ = writeln!(s, "session_id={}", session.id);
    let _ = writeln!(s, "frame_count={}", session.frames.len());
    s.push_str("init=");
    s.push_str(&pose_fields(&session.init).map(num).join(" "));
    s.push('\n');
    for f in &session.frames {
        let _ = write!(s, "frame {} {} {} {}", f.session, f.index, num(f.timestamp), cloud_name(f));
        push_nums(&mut s, pose_fields(&f.pose));
        push_nums(&mut s, f.covariance.upper_triangle());
        let _ = writeln!(s, " {}", u8::from(f.keyframe));
    }
    s
}

/// Frame rows without clouds, as read from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub session: Session,
    /// Cloud path of each frame, relative to the session directory.
    pub clouds: Vec<String>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest, StoreError> {
    let mut id = None;
    let mut count = None;
    let mut init = Pose::identity();
    let mut frames = Vec::new();
    let mut clouds = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("frame ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 4 + 7 + 21 + 1 {
                return Err(StoreError::parse(path, ln, format!("frame row has {} fields, expected 33", f.len())));
            }
            let int = |s: &str| s.parse::<u32>().map_err(|e| StoreError::parse(path, ln, format!("'{s}': {e}")));
            let (session, index) = (int(f[0])?, int(f[1])?);
            let timestamp = parse_floats(&f[2..3], path, ln)?[0];
            let pose = pose_from_fields(&parse_floats(&f[4..11], path, ln)?, path, ln)?;
            let cov: [f64; 21] = parse_floats(&f[11..32], path, ln)?.try_into().expect("21 entries");
            let covariance = TangentCovariance::from_upper_triangle(&cov).map_err(|e| StoreError::parse(path, ln, e.to_string()))?;
            let keyframe = match f[32] {
                "0" => false,
                "1" => true,
                o => return Err(StoreError::parse(path, ln, format!("keyframe flag must be 0 or 1, got '{o}'"))),
            };
            clouds.push(f[3].to_string());
            frames.push(Frame { session, index, timestamp, pose, covariance, keyframe, cloud: PointCloud::default() });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| StoreError::parse(path, ln, format!("expected key=value, got '{line}'")))?;
        match key {
            "format" if value == "msmap-session 1" => {}
            "format" => return Err(StoreError::parse(path, ln, format!("unsupported format '{value}'"))),
            "session_id" => id = Some(value.parse::<u32>().map_err(|e| StoreError::parse(path, ln, e.to_string()))?),
            "frame_count" => count = Some(value.parse::<usize>().map_err(|e| StoreError::parse(path, ln, e.to_string()))?),
            "init" => {
                let f: Vec<&str> = value.split_whitespace().collect();
                if f.len() != 7 {
                    return Err(StoreError::parse(path, ln, "init needs tx ty tz qx qy qz qw"));
                }
                init = pose_from_fields(&parse_floats(&f, path, ln)?, path, ln)?;
            }
            other => return Err(StoreError::parse(path, ln, format!("unknown key '{other}'"))),
        }
    }
    let end = text.lines().count();
    let id = id.ok_or_else(|| StoreError::parse(path, end, "missing session_id"))?;
    let count = count.ok_or_else(|| StoreError::parse(path, end, "missing frame_count"))?;
    if count != frames.len() {
        return Err(StoreError::parse(path, end, format!("frame_count={count} but {} frame rows", frames.len())));
    }
    Ok(Manifest { session: Session { id, init, frames }, clouds })
}

pub fn save_session(dir: &Path, session: &Session) -> Result<(), StoreError> {
    for f in &session.frames {
        write_ply(&dir.join(cloud_name(f)), &f.cloud.points)?;
    }
    write_text(&dir.join(MANIFEST), &manifest_text(session))
}

/// Manifest only; clouds left empty.
pub fn load_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST);
    parse_manifest(&read_text(&path)?, &path)
}

pub fn load_session(dir: &Path) -> Result<Session, StoreError> {
    let Manifest { mut session, clouds } = load_manifest(dir)?;
    for (f, rel) in session.frames.iter_mut().zip(&clouds) {
        f.cloud = PointCloud::new(read_ply(&dir.join(rel))?);
    }
    Ok(session)
}

// ---- trajectories ----

pub fn trajectory_text(traj: &Trajectory) -> String {
    let mut s = String::new();
    for (t, p) in traj.samples() {
        s.push_str(&num(*t));
        push_nums(&mut s, pose_fields(p));
        s.push('\n');
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory, StoreError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(StoreError::parse(path, i + 1, format!("expected 8 fields, got {}", f.len())));
        }
        let v = parse_floats(&f, path, i + 1)?;
        samples.push((v[0], pose_from_fields(&v[1..], path, i + 1)?));
    }
    Trajectory::new(samples).map_err(|e| StoreError::parse(path, 0, e.to_string()))
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<(), StoreError> {
    write_text(path, &trajectory_text(traj))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, StoreError> {
    parse_trajectory(&read_text(path)?, path)
}

// ---- pose graphs ----

pub fn vertex_id(n: NodeId) -> u64 {
    n.session as u64 * NODE_STRIDE + n.index as u64
}

pub fn node_id(v: u64) -> NodeId {
    NodeId::new((v / NODE_STRIDE) as u32, (v % NODE_STRIDE) as u32)
}

/// Swaps `[rot | trans]` and `[trans | rot]` block order.
fn swap_blocks(m: &Matrix6<f64>) -> Matrix6<f64> {
    let p = [3, 4, 5, 0, 1, 2];
    Matrix6::from_fn(|r, c| m[(p[r], p[c])])
}

fn edge_tag(kind: FactorKind) -> &'static str {
    match kind {
        FactorKind::Odometry => "EDGE_SE3:QUAT",
        FactorKind::Loop => "EDGE_SE3_LOOP:QUAT",
        FactorKind::Prior => "EDGE_SE3_PRIOR",
        FactorKind::MapPrior => "EDGE_SE3_MAP_PRIOR",
    }
}

pub fn graph_text(g: &PoseGraph) -> String {
    let mut s = String::new();
    match g.noise_model() {
        NoiseModel::Upgo => s.push_str("GRAPH_MODE upgo\n"),
        NoiseModel::Fpgo(t) => {
            s.push_str("GRAPH_MODE fpgo");
            push_nums(&mut s, [t.prior.rotation, t.prior.translation, t.odometry.rotation, t.odometry.translation, t.loop_closure.rotation, t.loop_closure.translation]);
            s.push('\n');
        }
    }
    for (id, p) in g.nodes() {
        let _ = write!(s, "VERTEX_SE3:QUAT {}", vertex_id(*id));
        push_nums(&mut s, pose_fields(p));
        s.push('\n');
    }
    for f in g.factors() {
        s.push_str(edge_tag(f.kind));
        match f.nodes {
            FactorNodes::Unary(a) => {
                let _ = write!(s, " {}", vertex_id(a));
            }
            FactorNodes::Binary(a, b) => {
                let _ = write!(s, " {} {}", vertex_id(a), vertex_id(b));
            }
        }
        push_nums(&mut s, pose_fields(&f.measurement));
        push_nums(&mut s, upper_triangle(&swap_blocks(&f.information)));
        s.push('\n');
    }
    s
}

pub fn parse_graph(text: &str, path: &Path) -> Result<PoseGraph, StoreError> {
    let mut graph: Option<PoseGraph> = None;
    let gerr = |ln: usize, e: GraphError| StoreError::parse(path, ln, e.to_string());
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        let Some((&tag, rest)) = f.split_first() else { continue };
        if tag.starts_with('#') {
            continue;
        }
        if tag == "GRAPH_MODE" {
            let mode = match rest {
                ["upgo"] => NoiseModel::Upgo,
                ["fpgo", v @ ..] if v.len() == 6 => {
                    let v = parse_floats(v, path, ln)?;
                    let d = |r: f64, t: f64| crate::graph::DiagonalNoise { rotation: r, translation: t };
                    NoiseModel::Fpgo(NoiseTable { prior: d(v[0], v[1]), odometry: d(v[2], v[3]), loop_closure: d(v[4], v[5]) })
                }
                _ => return Err(StoreError::parse(path, ln, "GRAPH_MODE must be 'upgo' or 'fpgo' with 6 variances")),
            };
            if graph.is_some() {
                return Err(StoreError::parse(path, ln, "GRAPH_MODE must come first"));
            }
            graph = Some(PoseGraph::new(mode));
            continue;
        }
        let g = graph.get_or_insert_with(|| PoseGraph::new(NoiseModel::Upgo));
        let id = |s: &str| s.parse::<u64>().map(node_id).map_err(|e| StoreError::parse(path, ln, format!("'{s}': {e}")));
        if tag == "VERTEX_SE3:QUAT" {
            if rest.len() != 8 {
                return Err(StoreError::parse(path, ln, "vertex needs id and 7 pose values"));
            }
            let pose = pose_from_fields(&parse_floats(&rest[1..], path, ln)?, path, ln)?;
            g.add_node(id(rest[0])?, pose).map_err(|e| gerr(ln, e))?;
            continue;
        }
        let (kind, arity) = match tag {
            "EDGE_SE3:QUAT" => (FactorKind::Odometry, 2),
            "EDGE_SE3_LOOP:QUAT" => (FactorKind::Loop, 2),
            "EDGE_SE3_PRIOR" => (FactorKind::Prior, 1),
            "EDGE_SE3_MAP_PRIOR" => (FactorKind::MapPrior, 1),
            other => return Err(StoreError::parse(path, ln, format!("unknown record '{other}'"))),
        };
        if rest.len() != arity + 7 + 21 {
            return Err(StoreError::parse(path, ln, format!("{tag} needs {} fields, got {}", arity + 28, rest.len())));
        }
        let nodes = if arity == 1 { FactorNodes::Unary(id(rest[0])?) } else { FactorNodes::Binary(id(rest[0])?, id(rest[1])?) };
        let measurement = pose_from_fields(&parse_floats(&rest[arity..arity + 7], path, ln)?, path, ln)?;
        let info: [f64; 21] = parse_floats(&rest[arity + 7..], path, ln)?.try_into().expect("21 entries");
        let information = swap_blocks(&from_upper_triangle(&info));
        g.push_factor_with_information(kind, nodes, measurement, information).map_err(|e| gerr(ln, e))?;
    }
    Ok(graph.unwrap_or_else(|| PoseGraph::new(NoiseModel::Upgo)))
}

pub fn save_graph(path: &Path, g: &PoseGraph) -> Result<(), StoreError> {
    write_text(path, &graph_text(g))
}

pub fn load_graph(path: &Path) -> Result<PoseGraph, StoreError> {
    parse_graph(&read_text(path)?, path)
}

// ---- key=value reports ----

/// Ordered `key=value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.push(key, num(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, StoreError> {
        let mut r = Report::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| StoreError::parse(path, i + 1, format!("expected key=value, got '{line}'")))?;
            r.push(k.trim(), v.trim());
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Report::parse(&read_text(path)?, path)
    }
}

// ---- keyframe decisions ----

pub fn decisions_text(records: &[DecisionRecord]) -> String {
    let mut s = String::from("# frame_id d_w b touched eligible voxel_count\n");
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn parse_decisions(text: &str, path: &Path) -> Result<Vec<DecisionRecord>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| DecisionRecord::parse_line(l).ok_or_else(|| StoreError::parse(path, i + 1, format!("malformed decision '{l}'"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_ply_names_file_and_line() {
        let text = ply_text(&[Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]);
        let cut: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        let err = parse_ply(&cut, Path::new("a.ply")).unwrap_err().to_string();
        assert!(err.starts_with("a.ply:9:"), "{err}");
    }

    #[test]
    fn identity_information_has_unit_diagonal_entries() {
        let mut g = PoseGraph::new(NoiseModel::Upgo);
        g.add_node(NodeId::new(0, 0), Pose::identity()).unwrap();
        g.add_prior(NodeId::new(0, 0), Pose::identity(), &TangentCovariance::isotropic(1.0)).unwrap();
        let text = graph_text(&g);
        let edge = text.lines().find(|l| l.starts_with("EDGE_SE3_PRIOR")).unwrap();
        let info: Vec<f64> = edge.split_whitespace().skip(9).map(|x| x.parse().unwrap()).collect();
        assert_eq!(info.len(), 21);
        for (i, v) in info.iter().enumerate() {
            let diag = [0, 6, 11, 15, 18, 20].contains(&i);
            assert_eq!(*v, if diag { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn edge_to_undeclared_vertex_is_rejected() {
        let text = format!("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 5 0 0 0 0 0 0 1{}\n", " 1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 1 0 0 1 0 1");
        let err = parse_graph(&text, Path::new("g.g2o")).unwrap_err().to_string();
        assert!(err.contains("g.g2o:2") && err.contains("does not exist"), "{err}");
    }

    #[test]
    fn empty_session_manifest() {
        let s = Session::new(3, Pose::identity());
        let m = parse_manifest(&manifest_text(&s), Path::new("m")).unwrap();
        assert_eq!(m.session, s);
    }

    #[test]
    fn bad_quaternion_is_rejected() {
        let text = "session_id=0\nframe_count=0\ninit=0 0 0 0 0 0 2\n";
        assert!(parse_manifest(text, Path::new("m")).unwrap_err().to_string().contains("m:3"));
    }
}
