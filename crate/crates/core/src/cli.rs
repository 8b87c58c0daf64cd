//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluation::{compare_trajectories, estimate_epsilon};
use crate::geometry::{Pose2D, StampedPose, Vec2};
use crate::grid::Scan;
use crate::io::{
    format_report, read_landmarks, read_odometry, read_trajectory, read_world, write_detections,
    write_error_series, write_landmarks, write_odometry, write_trajectory, write_world, ScanReader, ScanWriter,
};
use crate::localization::localize_run;
use crate::mapping::{build_global_map, collect_local_maps, extend_map, LandmarkMap};
use crate::poles::extract_poles;
use crate::simulator::{crossing_objects, generate_world, simulate_run, Frame};

#[derive(Debug, Parser)]
#[command(name = "polemap", version, about = "Pole landmark mapping and localization from 3-D lidar")]
struct Cli {
    /// Configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and drive through it, writing ground truth,
    /// odometry and scans.
    Simulate(SimulateArgs),
    /// Detect poles in a set of scans accumulated into one grid.
    Extract(ExtractArgs),
    /// Build a landmark map from map-frame scans and their trajectory.
    BuildMap(BuildMapArgs),
    /// Add a new session to an existing map.
    ExtendMap(ExtendMapArgs),
    /// Track a drive against a map from odometry and odometry-frame scans.
    Localize(LocalizeArgs),
    /// Compare an estimated trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Fraction of a session's local landmarks that match no map landmark.
    EstimateEpsilon(EpsilonArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Use this world instead of generating one.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Use this ground-truth trajectory instead of the configured route.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Grid center `x,y`; defaults to the mean sensor position.
    #[arg(long, value_parser = parse_vec2)]
    center: Option<Vec2<f64>>,
}

#[derive(Debug, Args)]
struct BuildMapArgs {
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExtendMapArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    /// Trajectories of the sessions already in the map.
    #[arg(long = "visited", required = true)]
    visited: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    odometry: PathBuf,
    #[arg(long)]
    scans: PathBuf,
    /// Initial pose `t,x,y,phi`.
    #[arg(long, value_parser = parse_initial, conflicts_with = "initial_from", required_unless_present = "initial_from")]
    initial: Option<StampedPose<f64>>,
    /// Take the initial pose from the first row of this trajectory.
    #[arg(long)]
    initial_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Arc length between samples (m).
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample error series (CSV).
    #[arg(long)]
    dump_errors: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EpsilonArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("cannot parse `{p}`"))?;
    }
    Ok(out)
}

fn parse_vec2(s: &str) -> std::result::Result<Vec2<f64>, String> {
    let [x, y] = parse_floats(s)?;
    Ok(Vec2::new(x, y))
}

fn parse_initial(s: &str) -> std::result::Result<StampedPose<f64>, String> {
    let [t, x, y, phi] = parse_floats(s)?;
    Ok(StampedPose::new(t, Pose2D::new(x, y, phi)))
}

/// Yields scans until the first read error, which it keeps.
struct Trap<I> {
    inner: I,
    error: Option<Error>,
}

impl<I: Iterator<Item = Result<Scan<f64>>>> Iterator for Trap<I> {
    type Item = Scan<f64>;

    fn next(&mut self) -> Option<Scan<f64>> {
        match self.inner.next()? {
            Ok(s) => Some(s),
            Err(e) => {
                self.error = Some(e);
                None
            }
        }
    }
}

fn with_scans<R>(path: &Path, f: impl FnOnce(&mut dyn Iterator<Item = Scan<f64>>) -> Result<R>) -> Result<R> {
    let mut trap = Trap {
        inner: ScanReader::open(path)?,
        error: None,
    };
    let out = f(&mut trap);
    match trap.error {
        Some(e) => Err(e),
        None => out,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn simulate(cfg: &PipelineConfig, a: &SimulateArgs) -> Result<()> {
    let sim = &cfg.simulation;
    let trajectory = match &a.trajectory {
        Some(p) => read_trajectory(p)?,
        None => sim.trajectory()?,
    };
    let world = match &a.world {
        Some(p) => read_world(p)?,
        None => {
            let route: Vec<Vec2<f64>> = match a.trajectory {
                Some(_) => trajectory.iter().map(|p| p.pose.translation()).collect(),
                None => sim.route(),
            };
            let mut world = generate_world(&sim.world_spec(route), cfg.seed)?;
            world.dynamic = crossing_objects(&trajectory, &sim.crossing_spec(), cfg.seed);
            world
        }
    };
    let run = simulate_run(&world, &sim.sensor(), &trajectory, &sim.odometry_noise(), cfg.seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|source| Error::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    let dir = &a.out_dir;
    write_world(&dir.join("world.csv"), &run.world)?;
    write_trajectory(&dir.join("ground_truth.csv"), &run.ground_truth)?;
    write_trajectory(&dir.join("odometry_poses.csv"), &run.odometry_poses)?;
    write_odometry(&dir.join("odometry.csv"), &run.odometry)?;
    for (name, frame) in [("scans_map.bin", Frame::Truth), ("scans_odom.bin", Frame::Odometry)] {
        let mut w = ScanWriter::create(&dir.join(name))?;
        for scan in run.scans(frame) {
            w.write(&scan)?;
        }
        w.finish()?;
    }
    Ok(())
}

fn extract(cfg: &PipelineConfig, a: &ExtractArgs) -> Result<()> {
    let scans: Vec<Scan<f64>> = ScanReader::open(&a.scans)?.collect::<Result<_>>()?;
    let center = match a.center {
        Some(c) => c,
        None => {
            let starts = scans.iter().flat_map(|s| s.rays.iter().map(|r| r.start.xy()));
            let (sum, n) = starts.fold((Vec2::new(0.0, 0.0), 0usize), |(s, n), p| (s + p, n + 1));
            if n == 0 {
                return Err(Error::Empty("scans"));
            }
            sum.scale(1.0 / n as f64)
        }
    };
    let geometry = cfg.grid.geometry_at(center)?;
    let detections = extract_poles(scans.iter().flat_map(|s| &s.rays), geometry, &cfg.detector)?;
    write_detections(&a.out, &detections)
}

fn build_map(cfg: &PipelineConfig, a: &BuildMapArgs) -> Result<()> {
    let trajectory = read_trajectory(&a.trajectory)?;
    let (map, _) = with_scans(&a.scans, |scans| build_global_map(scans, &trajectory, &cfg.mapping()))?;
    write_landmarks(&a.out, map.landmarks())
}

fn extend(cfg: &PipelineConfig, a: &ExtendMapArgs, out: &mut dyn Write) -> Result<()> {
    let mut map = LandmarkMap::new(read_landmarks(&a.map)?);
    for p in &a.visited {
        map.visited.extend(read_trajectory(p)?.iter().map(|p| p.pose.translation()));
    }
    let trajectory = read_trajectory(&a.trajectory)?;
    let (map, stats) = with_scans(&a.scans, |scans| {
        extend_map(map, scans, &trajectory, cfg.min_distance, &cfg.mapping())
    })?;
    write_landmarks(&a.out, map.landmarks())?;
    writeln!(out, "f_map={}", stats.fraction_used()).map_err(stdout_err)
}

fn localize(cfg: &PipelineConfig, a: &LocalizeArgs) -> Result<()> {
    let map = LandmarkMap::new(read_landmarks(&a.map)?);
    let odometry = read_odometry(&a.odometry)?;
    let initial = match (&a.initial, &a.initial_from) {
        (Some(p), _) => *p,
        (None, Some(path)) => *read_trajectory(path)?.first().ok_or(Error::Empty("initial trajectory"))?,
        (None, None) => return Err(Error::Config("an initial pose is required".into())),
    };
    let estimate = with_scans(&a.scans, |scans| {
        localize_run(&map, initial, &odometry, scans, &cfg.localization())
    })?;
    write_trajectory(&a.out, &estimate)
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let estimate = read_trajectory(&a.estimate)?;
    let truth = read_trajectory(&a.ground_truth)?;
    let report = compare_trajectories(&estimate, &truth, a.spacing)?;
    let text = format_report(&report);
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => out.write_all(text.as_bytes()).map_err(stdout_err)?,
    }
    if let Some(p) = &a.dump_errors {
        write_error_series(p, &report.samples)?;
    }
    Ok(())
}

fn epsilon(cfg: &PipelineConfig, a: &EpsilonArgs, out: &mut dyn Write) -> Result<()> {
    let map = LandmarkMap::new(read_landmarks(&a.map)?);
    let trajectory = read_trajectory(&a.trajectory)?;
    let locals = with_scans(&a.scans, |scans| collect_local_maps(scans, &trajectory, &cfg.mapping()))?;
    let eps = estimate_epsilon(&map, &locals)?;
    writeln!(out, "unmatched_fraction={eps}").map_err(stdout_err)
}

fn stdout_err(source: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Extract(a) => extract(&cfg, a),
        Command::BuildMap(a) => build_map(&cfg, a),
        Command::ExtendMap(a) => extend(&cfg, a, out),
        Command::Localize(a) => localize(&cfg, a),
        Command::Evaluate(a) => evaluate(a, out),
        Command::EstimateEpsilon(a) => epsilon(&cfg, a, out),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status: 0 on success, 1 on a pipeline error, 2 on a usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
