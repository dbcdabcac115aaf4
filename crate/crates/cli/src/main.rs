//! Command line front-end: each pipeline stage as a subcommand, plus `run`
//! for the whole chain.
//!
//! Exit codes: 0 on success, 2 on validation/input errors, 3 on stage
//! failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use orbitsfm_core::camera::CameraIntrinsics;
use orbitsfm_core::error::Error as CoreError;
use orbitsfm_core::orbit::{orbit_pose, Observation, Reconstruction};
use orbitsfm_core::pipeline::{
    self, compare_reconstructions, evaluate_tracks, run_pipeline, InitSource, PipelineConfig,
    TrackSource,
};
use orbitsfm_core::sim::{self, GtSidecar, OrbitParamsJson};
use orbitsfm_core::solver::{optimize, triangulate_landmarks, OptimizeOpts};
use orbitsfm_core::tracker::{self, TrackerConfig};
use orbitsfm_core::{load_events, save_events, EventFormat};

#[derive(Parser)]
#[command(
    name = "orbitsfm",
    about = "Spin-rate, rotation-axis and sparse-structure recovery for spinning objects seen by an event camera"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a spinning-object event stream and its ground truth.
    Simulate(SimulateArgs),
    /// Detect, cluster and extract feature tracks from an event file.
    Track(TrackArgs),
    /// Fit initial orbit parameters from poses and the event stream.
    Init(InitArgs),
    /// Refine orbit parameters and structure from tracks.
    Solve(SolveArgs),
    /// Run the full pipeline from a config file or inline flags.
    Run(RunArgs),
    /// Evaluate tracks against ground-truth poses.
    EvalTracks(EvalTracksArgs),
    /// Compare two reconstructions over the same tracks.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description JSON.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    width: u16,
    #[arg(long)]
    height: u16,
    /// Tracker configuration JSON (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event file layout.
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    /// Event CSV used for the frequency estimate.
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
    /// COLMAP text model directory as the pose source.
    #[arg(long)]
    colmap_dir: Option<PathBuf>,
    /// Ground-truth sidecar as the pose source.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Perturb ground-truth poses with this seed (requires --gt).
    #[arg(long)]
    perturb_seed: Option<u64>,
    /// Track window duration in seconds.
    #[arg(long, default_value_t = 0.030)]
    dt: f64,
    /// FFT sampling window duration in seconds.
    #[arg(long, default_value_t = 0.020)]
    dt_f: f64,
    /// Output orbit JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the frequency spectrum here.
    #[arg(long)]
    spectrum: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// Initial orbit JSON (as written by `init`).
    #[arg(long)]
    init: PathBuf,
    /// Intrinsics as fx,fy,cx,cy (alternative: --gt).
    #[arg(long)]
    intrinsics: Option<String>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.030)]
    dt: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration JSON; overrides every inline flag except
    /// --out-dir and --seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// simulator_gt | perturbed_gt | a COLMAP model directory.
    #[arg(long, default_value = "simulator_gt")]
    init_source: String,
    /// "events" or "gt:<sigma_px>".
    #[arg(long, default_value = "events")]
    track_source: String,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalTracksArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.030)]
    dt: f64,
    /// Evaluate poses at window midpoints (for tracker-derived tracks).
    #[arg(long, default_value_t = true)]
    midpoint_poses: bool,
    /// Per-track CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    a_ply: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    b_ply: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    /// Report JSON destination (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Stage { .. }) => ExitCode::from(3),
        Some(_) => ExitCode::from(2),
        None => ExitCode::from(2),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Track(args) => track(args),
        Command::Init(args) => init(args),
        Command::Solve(args) => solve(args),
        Command::Run(args) => run(args),
        Command::EvalTracks(args) => eval_tracks(args),
        Command::Compare(args) => compare(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = sim::load_scene_spec(&args.scene)
        .with_context(|| format!("reading scene {}", args.scene.display()))?;
    let scene = spec.build()?;
    let (stream, associations) = sim::gt_events(&scene, &spec.events)?;
    std::fs::create_dir_all(&args.out_dir)?;
    save_events(&stream, args.out_dir.join("events.csv"))?;
    let sidecar = GtSidecar {
        scene: spec,
        landmarks: scene
            .landmarks
            .iter()
            .map(|l| [l.position.x, l.position.y, l.position.z])
            .collect(),
        normals: scene
            .landmarks
            .iter()
            .map(|l| [l.normal.x, l.normal.y, l.normal.z])
            .collect(),
        associations,
    };
    sim::save_gt_sidecar(&sidecar, args.out_dir.join("gt.json"))?;
    println!(
        "wrote {} events and ground truth to {}",
        stream.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn load_tracker_config(path: &Option<PathBuf>) -> Result<TrackerConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing tracker config {}", p.display()))?,
        None => TrackerConfig::default(),
    };
    Ok(cfg)
}

fn track(args: TrackArgs) -> Result<()> {
    let format = match args.format.as_str() {
        "csv" => EventFormat::Csv,
        "text" => EventFormat::Text,
        other => return Err(anyhow!("unknown event format '{other}'")),
    };
    let cfg = load_tracker_config(&args.config)?;
    cfg.validate()?;
    let stream = load_events(&args.events, format, args.width, args.height)?;
    let corners = tracker::detect_corners(&stream);
    let dense = tracker::density_filter(&corners, &stream, &cfg);
    let clusters = tracker::cluster_corners(&dense, &cfg)?;
    let merged = tracker::merge_clusters(clusters, cfg.phi, cfg.n_sigma, cfg.time_scale);
    let tracks = tracker::extract_tracks(&merged, cfg.dt, stream.t_first(), stream.duration())?;
    tracker::save_tracks(&tracks, cfg.dt, &args.out)?;
    println!(
        "{} events -> {} corners -> {} tracks ({})",
        stream.len(),
        corners.len(),
        tracks.len(),
        args.out.display()
    );
    Ok(())
}

/// Orbit JSON written by `init` and read by `solve`.
#[derive(serde::Serialize, serde::Deserialize)]
struct InitFile {
    orbit: OrbitParamsJson,
    fft_hz: f64,
    intrinsics: Option<CameraIntrinsics>,
}

fn init(args: InitArgs) -> Result<()> {
    // Pose source.
    let (poses, intrinsics, sensor) = if let Some(dir) = &args.colmap_dir {
        let model = orbitsfm_core::colmap::load_model(dir)?;
        (model.pose_set(args.dt), Some(model.intrinsics), None)
    } else if let Some(gt_path) = &args.gt {
        let sidecar = sim::load_gt_sidecar(gt_path)?;
        let scene = sidecar.scene.build()?;
        let mut poses = scene.gt_poses(args.dt, 0.0)?;
        if let Some(seed) = args.perturb_seed {
            poses = pipeline::perturb_poses(&poses, 5.0, 0.05, scene.orbit.r, seed);
        }
        (
            poses,
            Some(scene.intrinsics),
            Some((scene.width, scene.height)),
        )
    } else {
        return Err(anyhow!("pass either --colmap-dir or --gt as the pose source"));
    };

    let (width, height) = match (args.width, args.height, sensor) {
        (Some(w), Some(h), _) => (w, h),
        (_, _, Some(s)) => s,
        _ => return Err(anyhow!("pass --width/--height for the event file")),
    };
    let stream = load_events(&args.events, EventFormat::Csv, width, height)?;
    let estimate = orbitsfm_core::estimate_frequency(&stream, args.dt_f)?;
    if !estimate.dominant {
        return Err(CoreError::Validation("no dominant frequency in the stream".into()).into());
    }
    let orbit = orbitsfm_core::init_orbit(&poses, estimate.f_hz)?;

    let init_file = InitFile {
        orbit: OrbitParamsJson::from(&orbit),
        fft_hz: estimate.f_hz,
        intrinsics,
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&init_file)?)?;
    if let Some(spectrum_path) = &args.spectrum {
        let mut out = String::from("freq_hz,power\n");
        for (f, p) in &estimate.spectrum {
            writeln!(out, "{f},{p}").expect("write");
        }
        std::fs::write(spectrum_path, out)?;
    }
    println!(
        "initialized orbit at {:.4} Hz (r = {:.4}) -> {}",
        orbit.f,
        orbit.r,
        args.out.display()
    );
    Ok(())
}

fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("intrinsics must be fx,fy,cx,cy"))?;
    if parts.len() != 4 {
        return Err(anyhow!("intrinsics must be fx,fy,cx,cy"));
    }
    Ok(CameraIntrinsics::new(parts[0], parts[1], parts[2], parts[3]))
}

fn observations_of(tracks: &[tracker::FeatureTrack]) -> Vec<Observation> {
    let mut obs = Vec::new();
    for (idx, track) in tracks.iter().enumerate() {
        for s in &track.samples {
            obs.push(Observation {
                track: idx,
                window: s.window,
                px: nalgebra::Vector2::new(s.u, s.v),
            });
        }
    }
    obs
}

fn solve(args: SolveArgs) -> Result<()> {
    let init_file: InitFile = serde_json::from_str(&std::fs::read_to_string(&args.init)?)
        .with_context(|| format!("parsing init {}", args.init.display()))?;
    let intrinsics = match (&args.intrinsics, &init_file.intrinsics, &args.gt) {
        (Some(text), _, _) => parse_intrinsics(text)?,
        (None, Some(k), _) => *k,
        (None, None, Some(gt)) => sim::load_gt_sidecar(gt)?.scene.build()?.intrinsics,
        _ => return Err(anyhow!("no intrinsics available; pass --intrinsics")),
    };
    let tracks = tracker::load_tracks(&args.tracks)?;
    let observations = observations_of(&tracks);
    let orbit = init_file.orbit.to_orbit()?;
    let (landmarks, _, solve_obs) =
        triangulate_landmarks(&observations, &orbit, &intrinsics, args.dt)?;
    let init = Reconstruction::initial(orbit, landmarks, intrinsics, args.dt);
    let opts = OptimizeOpts {
        dt: args.dt,
        ..Default::default()
    };
    let out = optimize(&init, &solve_obs, &opts)?;
    std::fs::create_dir_all(&args.out_dir)?;
    pipeline::save_reconstruction(&out, args.out_dir.join("reconstruction.json"))?;
    pipeline::save_ply(&out.landmarks, args.out_dir.join("cloud.ply"))?;
    println!(
        "refined: f = {:.4} Hz, rms = {:.3} px, converged = {} -> {}",
        out.orbit.f,
        out.rms_reprojection,
        out.converged,
        args.out_dir.display()
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut config: PipelineConfig = if let Some(path) = &args.config {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing pipeline config {}", path.display()))?
    } else {
        let events = args
            .events
            .clone()
            .ok_or_else(|| anyhow!("pass --events or --config"))?;
        let init = match args.init_source.as_str() {
            "simulator_gt" => InitSource::SimulatorGt,
            "perturbed_gt" => InitSource::PerturbedGt,
            dir => InitSource::ColmapModel { dir: dir.into() },
        };
        let track_source = match args.track_source.as_str() {
            "events" => TrackSource::Events,
            other => match other.strip_prefix("gt:") {
                Some(sigma) => TrackSource::GtObservations {
                    sigma_px: sigma.parse().map_err(|_| anyhow!("bad sigma in '{other}'"))?,
                },
                None => return Err(anyhow!("track source must be 'events' or 'gt:<sigma>'")),
            },
        };
        PipelineConfig {
            events,
            gt: args.gt.clone(),
            sensor_width: None,
            sensor_height: None,
            intrinsics: None,
            tracker: TrackerConfig::default(),
            dt_f: 0.020,
            init,
            track_source,
            optimizer: OptimizeOpts::default(),
            out_dir: PathBuf::from("orbitsfm_out"),
            seed: 0,
        }
    };
    if let Some(out_dir) = &args.out_dir {
        config.out_dir = out_dir.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = run_pipeline(&config)?;
    let m = &out.metrics;
    println!(
        "f = {:.4} Hz (fft {:.4}), rms {:.3} -> {:.3} px, {} tracks, {} landmarks",
        m.frequency.optimized_hz,
        m.frequency.fft_hz,
        m.rms_reprojection.initial_px,
        m.rms_reprojection.optimized_px,
        m.track_count,
        m.landmark_count
    );
    if let (Some(gt_hz), Some(rel)) = (m.frequency.gt_hz, m.frequency.rel_error) {
        println!("vs ground truth {gt_hz:.4} Hz: {:.3}% off", 100.0 * rel);
    }
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}

fn eval_tracks(args: EvalTracksArgs) -> Result<()> {
    let sidecar = sim::load_gt_sidecar(&args.gt)?;
    let scene = sidecar.scene.build()?;
    let tracks = tracker::load_tracks(&args.tracks)?;
    let offset = if args.midpoint_poses { 0.5 * args.dt } else { 0.0 };
    let mut poses = BTreeMap::new();
    for w in 1..=scene.window_count(args.dt) {
        if let Ok(p) = orbit_pose(w as f64 * args.dt + offset, &scene.orbit) {
            poses.insert(w, p);
        }
    }
    let thresholds = [3.0, 5.0, 7.0];
    let evals = evaluate_tracks(&tracks, &poses, &scene.intrinsics, args.dt, &thresholds);
    let mut out = String::from(
        "track_id,n_samples,excluded,rmse3,age3,rmse5,age5,rmse7,age7\n",
    );
    for e in &evals {
        let mut row = format!("{},{},{}", e.track_id, e.n_samples, e.excluded as u8);
        for t in 0..thresholds.len() {
            match e.per_threshold.get(t) {
                Some(th) => {
                    let rmse = th
                        .rmse_px
                        .map(|r| format!("{r}"))
                        .unwrap_or_default();
                    write!(row, ",{},{}", rmse, th.feature_age_s).expect("write");
                }
                None => row.push_str(",,"),
            }
        }
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    println!("evaluated {} tracks -> {}", evals.len(), args.out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let a = pipeline::load_reconstruction(&args.a, Some(&args.a_ply))?;
    let b = pipeline::load_reconstruction(&args.b, Some(&args.b_ply))?;
    let tracks = tracker::load_tracks(&args.tracks)?;
    let observations = observations_of(&tracks);
    let report = compare_reconstructions(&a, &b, &observations, None)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}
