//! Command-line front end. `run` parses arguments, dispatches a subcommand
//! and maps failures to exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cloud::PointCloud;
use crate::graph::{GraphError, PoseGraph};
use crate::metrics::Trajectory;
use crate::pipeline::{self, MergeMode, PipelineConfig, PipelineError, PriorMap};
use crate::session::Session;
use crate::sim::{self, Scene, SessionSpec, SimError};
use crate::store::{self, Report, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ILL_POSED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Written by `merge`: new-session keyframes at their pre-merge odometry poses.
pub const ODOMETRY: &str = "odometry.txt";
pub const MERGE_REPORT: &str = "merge_report.txt";
pub const REPORT: &str = "report.txt";
pub const KEYFRAME_STATS: &str = "keyframe_stats.txt";
pub const SPEC: &str = "spec.txt";
pub const SCENE: &str = "scene.txt";

#[derive(Debug, Parser)]
#[command(name = "msmap", version, about = "Multi-session LiDAR map merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a session (manifest, clouds, ground truth) from a scene and a session spec.
    Simulate(SimulateArgs),
    /// Run the keyframe gate over a stored session.
    Filter(FilterArgs),
    /// Merge a new session into an old session or merged map.
    Merge(MergeArgs),
    /// Compare an estimate directory against ground truth.
    Eval(EvalArgs),
    /// Tabulate report files from one or more output directories.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Low-drift survey of both rooms.
    Reference,
    /// High-drift revisit with an offset initial guess.
    Revisit,
}

#[derive(Debug, Args)]
struct Common {
    /// key=value pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene file; defaults to the built-in two-room scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Session spec file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    session: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MergeArgs {
    /// Old session, or a previous merge output containing graph.g2o.
    #[arg(long)]
    old: PathBuf,
    #[arg(long)]
    new: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Overrides the config mode (upgo, fpgo, f2f, m2f).
    #[arg(long)]
    mode: Option<MergeMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Merge output or session directory.
    #[arg(long)]
    estimate: PathBuf,
    /// Simulator output with truth.txt and truth_map.ply.
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directories holding merge_report.txt and/or report.txt.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    IllPosed(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::IllPosed(_) => EXIT_ILL_POSED,
            CliError::Store(_) => EXIT_IO,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NoOverlap => CliError::Failed(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_ill_posed() {
            CliError::IllPosed(e.to_string())
        } else {
            CliError::Failed(e.to_string())
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        PipelineError::from(e).into()
    }
}

/// Runs the CLI on `args` (program name first), printing to stdout/stderr,
/// and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Simulate(a) => simulate(&a),
        Command::Filter(a) => filter(&a),
        Command::Merge(a) => merge(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = store::read_text(path)?;
            PipelineConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let scene = match &a.scene {
        Some(path) => Scene::parse(&store::read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => Scene::two_rooms(),
    };
    let seed = a.seed.unwrap_or(0);
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => SessionSpec::parse(&store::read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        (None, Some(Preset::Reference)) => SessionSpec::two_rooms_reference(seed),
        (None, Some(Preset::Revisit)) => SessionSpec::two_rooms_revisit(seed),
        (None, None) => return Err(CliError::Config("one of --spec or --preset is required".into())),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let sim = sim::generate_session(&scene, &spec)?;
    store::save_session(&a.out, &sim.session)?;
    store::save_trajectory(&a.out.join(store::TRUTH), &sim.truth_trajectory())?;
    store::write_ply(&a.out.join(store::TRUTH_MAP), scene.points())?;
    store::write_text(&a.out.join(SPEC), &spec.to_text())?;
    store::write_text(&a.out.join(SCENE), &scene.to_text())?;
    let points: usize = sim.session.frames.iter().map(|f| f.cloud.len()).sum();
    Ok(format!("session {} frames {} points {} -> {}\n", sim.session.id, sim.session.len(), points, a.out.display()))
}

fn filter(a: &FilterArgs) -> Result<String, CliError> {
    let cfg = load_config(&a.common)?;
    let mut session = store::load_session(&a.session)?;
    let decisions = pipeline::select_keyframes(&mut session, &cfg.keyframe)?;
    store::save_session(&a.out, &session)?;
    store::write_text(&a.out.join(store::DECISIONS), &store::decisions_text(&decisions))?;
    store::write_text(&a.out.join(KEYFRAME_STATS), &keyframe_stats(&decisions))?;
    let kf = session.keyframes().count();
    let mut r = Report::default();
    r.push("frames", session.len());
    r.push("keyframes", kf);
    r.push_f64("keyframe_ratio", kf as f64 / session.len().max(1) as f64);
    r.save(&a.out.join(REPORT))?;
    Ok(format!("keyframes {kf}/{} -> {}\n", session.len(), a.out.display()))
}

fn load_prior_map(dir: &Path, cfg: &PipelineConfig) -> Result<PriorMap, CliError> {
    let session = store::load_session(dir)?;
    let graph_path = dir.join(store::GRAPH);
    if graph_path.exists() {
        let graph = store::load_graph(&graph_path)?;
        Ok(PriorMap::from_graph(graph, &session)?)
    } else {
        Ok(PriorMap::from_session(&session, cfg)?)
    }
}

/// Gauge and conditioning diagnostics for an ill-posed graph.
fn gauge_diagnostics(graph: &PoseGraph) -> String {
    let mut s = String::new();
    if let Err(e) = graph.check_gauge() {
        let _ = write!(s, "{e}");
    }
    let Ok((h, _)) = graph.normal_equations() else { return s };
    let eig = h.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let null = eig.iter().filter(|v| v.abs() <= 1e-9 * max.max(1.0)).count();
    let _ = write!(s, "; information matrix {}x{} has {null} near-zero eigenvalues", h.nrows(), h.ncols());
    s
}

fn merge(a: &MergeArgs) -> Result<String, CliError> {
    let mut cfg = load_config(&a.common)?;
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    let old = load_prior_map(&a.old, &cfg)?;
    if let Err(GraphError::GaugeFreedom { .. }) = old.graph.check_gauge() {
        return Err(CliError::IllPosed(gauge_diagnostics(&old.graph)));
    }
    let new = store::load_session(&a.new)?;
    let out = pipeline::merge(&old, &new, &cfg)?;
    store::save_session(&a.out, &out.merged)?;
    store::save_graph(&a.out.join(store::GRAPH), &out.graph)?;
    store::write_ply(&a.out.join(store::MERGED_MAP), &out.map.points)?;
    store::write_text(&a.out.join(store::DECISIONS), &store::decisions_text(&out.decisions))?;
    store::save_trajectory(&a.out.join(store::TRAJECTORY), &out.new_trajectory)?;
    store::save_trajectory(&a.out.join(ODOMETRY), &out.new_odometry)?;
    out.report.save(&a.out.join(MERGE_REPORT))?;
    Ok(format!(
        "{}: loops {} cost {:.6e} -> {:.6e} in {} iterations -> {}\n",
        cfg.mode,
        out.report.get("loops_accepted").unwrap_or("0"),
        out.optimization.initial_cost,
        out.optimization.final_cost,
        out.optimization.iterations,
        a.out.display()
    ))
}

/// `frame_id d_w voxel_count keyframe`
fn keyframe_stats(decisions: &[crate::keyframe::DecisionRecord]) -> String {
    let mut s = String::from("# frame_id d_w voxel_count keyframe\n");
    for r in decisions {
        let _ = writeln!(s, "{} {:.16e} {} {}", r.frame, r.decision.distance, r.decision.voxel_count, u8::from(r.decision.is_keyframe));
    }
    s
}

fn session_cloud(session: &Session) -> PointCloud {
    let mut map = PointCloud::default();
    for f in &session.frames {
        map.extend_transformed(&f.cloud, &session.world_pose(f));
    }
    map
}

fn session_trajectory(session: &Session) -> Result<Trajectory, CliError> {
    Trajectory::new(session.frames.iter().map(|f| (f.timestamp, session.world_pose(f))).collect())
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn eval(a: &EvalArgs) -> Result<String, CliError> {
    let cfg = load_config(&a.common)?;
    let truth_map = PointCloud::new(store::read_ply(&a.truth.join(store::TRUTH_MAP))?);
    let truth_path = a.truth.join(store::TRUTH);
    let truth = if truth_path.exists() { Some(store::load_trajectory(&truth_path)?) } else { None };

    let map_path = a.estimate.join(store::MERGED_MAP);
    let traj_path = a.estimate.join(store::TRAJECTORY);
    let (map, estimate) = if map_path.exists() {
        let est = if traj_path.exists() { Some(store::load_trajectory(&traj_path)?) } else { None };
        (PointCloud::new(store::read_ply(&map_path)?), est)
    } else {
        let session = store::load_session(&a.estimate)?;
        let est = session_trajectory(&session)?;
        (session_cloud(&session), Some(est))
    };
    let report = pipeline::evaluate(estimate.as_ref(), truth.as_ref(), &map, &truth_map, &cfg.metric)?;
    report.save(&a.out.join(REPORT))?;

    let decisions_path = a.estimate.join(store::DECISIONS);
    if decisions_path.exists() {
        let decisions = store::parse_decisions(&store::read_text(&decisions_path)?, &decisions_path)?;
        store::write_text(&a.out.join(KEYFRAME_STATS), &keyframe_stats(&decisions))?;
    }
    Ok(report.to_text())
}

fn report(a: &ReportArgs) -> Result<String, CliError> {
    let mut columns = Vec::new();
    for dir in &a.dirs {
        let mut merged = Report::default();
        let mut found = false;
        for name in [MERGE_REPORT, REPORT] {
            let path = dir.join(name);
            if path.exists() {
                found = true;
                for (k, v) in Report::load(&path)?.entries {
                    merged.push(&k, v);
                }
            }
        }
        if !found {
            return Err(StoreError::Io {
                path: dir.join(REPORT),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no report files in directory"),
            }
            .into());
        }
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        columns.push((name, merged));
    }
    let mut keys: Vec<String> = Vec::new();
    for (_, r) in &columns {
        for (k, _) in &r.entries {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    let width = keys.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut table = format!("{:width$}", "metric");
    for (name, _) in &columns {
        let _ = write!(table, "  {name:>22}");
    }
    table.push('\n');
    for k in &keys {
        let _ = write!(table, "{k:width$}");
        for (_, r) in &columns {
            let cell = match (r.get_f64(k), r.get(k)) {
                (Some(v), Some(raw)) if raw.contains(['e', '.']) => format!("{v:.6e}"),
                (_, Some(raw)) => raw.to_string(),
                _ => "-".into(),
            };
            let _ = write!(table, "  {cell:>22}");
        }
        table.push('\n');
    }
    if let Some(out) = &a.out {
        store::write_text(out, &table)?;
    }
    Ok(table)
}
