//! End-to-end orchestration: event file in, tracks, orbit initialization,
//! joint refinement, metrics and artifacts out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraPose, PoseSet, TimedPose};
use crate::colmap;
use crate::error::{Error, Result};
use crate::event::{load_events, EventFormat, EventStream};
use crate::geometry::axis_angle_deg;
use crate::init::{estimate_frequency, fit_circle, fit_plane, init_orbit, FrequencyEstimate};
use crate::orbit::{
    orbit_pose, residuals, rms_px, screw_line, Observation, Reconstruction,
};
use crate::sim::{
    align_similarity, gt_observations, GtSidecar, OrbitParamsJson, SimScene,
};
use crate::solver::{optimize, triangulate_landmarks, OptimizeOpts};
use crate::tracker::{
    cluster_corners, density_filter, detect_corners, extract_tracks, merge_clusters, Cluster,
    FeatureTrack, TrackSample, TrackerConfig,
};

/// Where the initial camera poses come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InitSource {
    /// Import a COLMAP text model from a directory.
    ColmapModel { dir: PathBuf },
    /// Exact ground-truth orbit poses from the scene sidecar.
    SimulatorGt,
    /// Ground-truth poses perturbed by 5% in f, 5 degrees in axis and R0
    /// (seeded by the pipeline seed).
    PerturbedGt,
}

/// Where the feature tracks come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TrackSource {
    /// The event tracking front-end on the loaded stream.
    Events,
    /// Ground-truth observations from the scene sidecar (requires gt).
    GtObservations { sigma_px: f64 },
}

/// Full pipeline configuration. `--config` files deserialize into this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Event CSV path.
    pub events: PathBuf,
    /// Ground-truth sidecar (scene + associations) when available.
    #[serde(default)]
    pub gt: Option<PathBuf>,
    /// Sensor size; taken from the sidecar when absent.
    #[serde(default)]
    pub sensor_width: Option<u16>,
    #[serde(default)]
    pub sensor_height: Option<u16>,
    /// Intrinsics override; taken from the sidecar when absent.
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default)]
    pub tracker: TrackerConfig,
    /// FFT sampling window duration in seconds.
    #[serde(default = "default_dt_f")]
    pub dt_f: f64,
    pub init: InitSource,
    #[serde(default = "default_track_source")]
    pub track_source: TrackSource,
    #[serde(default)]
    pub optimizer: OptimizeOpts,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt_f() -> f64 {
    0.020
}

fn default_track_source() -> TrackSource {
    TrackSource::Events
}

/// Summary of one pipeline run. Field order is the JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub frequency: FrequencyMetrics,
    /// Axis angle error against ground truth, min over the +/-n ambiguity.
    /// The world frame of a reconstruction is a gauge, so this also counts
    /// any unobservable frame rotation inherited from the initialization.
    pub axis_error_deg: Option<f64>,
    /// Axis angle error after transporting the estimated axis through the
    /// similarity alignment of the landmark clouds (gauge removed).
    pub axis_error_aligned_deg: Option<f64>,
    pub rms_reprojection: RmsMetrics,
    /// Landmark rmse after similarity alignment onto the ground truth.
    pub structure_rmse: Option<f64>,
    pub structure_rmse_pct_diameter: Option<f64>,
    pub converged: bool,
    pub track_count: usize,
    pub landmark_count: usize,
    pub observation_count: usize,
    pub feature_age: FeatureAgeMetrics,
    /// Per-threshold track evaluation against ground-truth poses.
    pub track_eval: Option<Vec<ThresholdSummary>>,
    pub purity: Option<PurityMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrequencyMetrics {
    /// FFT initialization.
    pub fft_hz: f64,
    /// After refinement.
    pub optimized_hz: f64,
    pub gt_hz: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RmsMetrics {
    pub initial_px: f64,
    pub optimized_px: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureAgeMetrics {
    pub mean_s: f64,
    pub median_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThresholdSummary {
    pub threshold_px: f64,
    pub evaluated_tracks: usize,
    pub median_rmse_px: Option<f64>,
    pub mean_rmse_px: Option<f64>,
    pub mean_feature_age_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PurityMetrics {
    pub tracks: usize,
    /// Fraction of tracks whose majority-landmark share is at least 0.9.
    pub fraction_pure_90: f64,
    pub mean_purity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StatusFile {
    ok: bool,
    failed_stage: Option<String>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

/// Deterministic per-pose perturbation modeling a noisy pose
/// initialization: every pose is rotated by `rot_deg` about a random axis
/// and its center is displaced by a random vector of length
/// `center_frac * scale`.
pub fn perturb_poses(
    poses: &PoseSet,
    rot_deg: f64,
    center_frac: f64,
    scale: f64,
    seed: u64,
) -> PoseSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let rand_dir = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        );
        if v.norm() > 1e-3 {
            break Unit::new_normalize(v);
        }
    };
    let noisy = poses
        .poses
        .iter()
        .map(|tp| {
            let spin = Rotation3::from_axis_angle(&rand_dir(&mut rng), rot_deg.to_radians());
            let center = tp.pose.center() + center_frac * scale * rand_dir(&mut rng).into_inner();
            let rotation = spin * tp.pose.rotation;
            TimedPose {
                t: tp.t,
                pose: CameraPose::new(rotation, -(rotation * center)),
            }
        })
        .collect();
    PoseSet::new(noisy)
}

/// Deterministic +/-5% frequency perturbation.
pub fn perturb_frequency(f: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0f0f_0f0f));
    f * if rng.gen_bool(0.5) { 1.05 } else { 0.95 }
}

/// Deterministic landmark jitter with sigma = `pct` of the cloud radius.
pub fn perturb_landmarks(landmarks: &[Vector3<f64>], pct: f64, seed: u64) -> Vec<Vector3<f64>> {
    let center = landmarks.iter().sum::<Vector3<f64>>() / landmarks.len().max(1) as f64;
    let radius = landmarks
        .iter()
        .map(|p| (p - center).norm())
        .fold(0.0, f64::max);
    let sigma = pct * radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51ce_ca57));
    let normal = rand_distr::Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    landmarks
        .iter()
        .map(|p| {
            use rand_distr::Distribution;
            p + Vector3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            )
        })
        .collect()
}

/// Tracks synthesized from ground-truth observations (track id ==
/// landmark id), used when the track source bypasses the event front-end.
fn tracks_from_observations(observations: &[Observation]) -> Vec<FeatureTrack> {
    let mut by_track: BTreeMap<usize, Vec<TrackSample>> = BTreeMap::new();
    for o in observations {
        by_track.entry(o.track).or_default().push(TrackSample {
            window: o.window,
            u: o.px.x,
            v: o.px.y,
        });
    }
    by_track
        .into_iter()
        .filter(|(_, samples)| samples.len() >= 2)
        .map(|(track_id, mut samples)| {
            samples.sort_by_key(|s| s.window);
            FeatureTrack {
                track_id,
                source_cluster: track_id,
                samples,
            }
        })
        .collect()
}

fn observations_from_tracks(tracks: &[FeatureTrack]) -> Vec<Observation> {
    let mut obs = Vec::new();
    for (idx, track) in tracks.iter().enumerate() {
        for s in &track.samples {
            obs.push(Observation {
                track: idx,
                window: s.window,
                px: Vector2::new(s.u, s.v),
            });
        }
    }
    obs
}

/// Ground-truth association purity of each track: the share of its cluster's
/// events that come from the track's majority landmark (background noise
/// counts against purity). Returns (track index, purity, majority landmark).
pub fn track_purity(
    tracks: &[FeatureTrack],
    clusters: &[Cluster],
    stream: &EventStream,
    associations: &[Option<usize>],
) -> Vec<(usize, f64, Option<usize>)> {
    use std::collections::HashMap;
    let mut lookup: HashMap<(u64, u16, u16, i8), std::collections::VecDeque<Option<usize>>> =
        HashMap::new();
    for (e, a) in stream.events.iter().zip(associations) {
        lookup
            .entry((e.t.to_bits(), e.x, e.y, e.p))
            .or_default()
            .push_back(*a);
    }
    let by_id: BTreeMap<usize, &Cluster> = clusters.iter().map(|c| (c.id, c)).collect();
    tracks
        .iter()
        .enumerate()
        .map(|(idx, track)| {
            let Some(cluster) = by_id.get(&track.source_cluster) else {
                return (idx, 0.0, None);
            };
            let mut counts: BTreeMap<Option<usize>, usize> = BTreeMap::new();
            let mut total = 0usize;
            for m in &cluster.members {
                let key = (m.event.t.to_bits(), m.event.x, m.event.y, m.event.p);
                let assoc = lookup.get_mut(&key).and_then(|q| q.pop_front()).flatten();
                *counts.entry(assoc).or_default() += 1;
                total += 1;
            }
            let (majority, count) = counts
                .iter()
                .filter(|(k, _)| k.is_some())
                .max_by_key(|(_, &c)| c)
                .map(|(k, &c)| (*k, c))
                .unwrap_or((None, 0));
            (idx, count as f64 / total.max(1) as f64, majority)
        })
        .collect()
}

/// Per-track evaluation against known poses: triangulate one point per track
/// by linear DLT over all samples, reproject, and per threshold report the
/// RMSE and feature age of the surviving samples.
#[derive(Debug, Clone)]
pub struct TrackEvaluation {
    pub track_id: usize,
    pub n_samples: usize,
    /// Dropped: fewer than two samples or degenerate triangulation.
    pub excluded: bool,
    pub per_threshold: Vec<ThresholdEval>,
}

#[derive(Debug, Clone)]
pub struct ThresholdEval {
    pub threshold_px: f64,
    /// RMSE of the surviving samples; None when none survive.
    pub rmse_px: Option<f64>,
    /// (last - first surviving window) * dt.
    pub feature_age_s: f64,
    pub inliers: usize,
}

fn dlt_triangulate(
    samples: &[(&CameraPose, Vector2<f64>)],
    k: &CameraIntrinsics,
) -> Option<Vector3<f64>> {
    let mut a = DMatrix::zeros(2 * samples.len(), 4);
    for (i, (pose, px)) in samples.iter().enumerate() {
        let r = pose.rotation.matrix();
        let t = pose.translation;
        // Projection rows of K [R | t].
        let p0 = [
            k.fx * r[(0, 0)] + k.cx * r[(2, 0)],
            k.fx * r[(0, 1)] + k.cx * r[(2, 1)],
            k.fx * r[(0, 2)] + k.cx * r[(2, 2)],
            k.fx * t.x + k.cx * t.z,
        ];
        let p1 = [
            k.fy * r[(1, 0)] + k.cy * r[(2, 0)],
            k.fy * r[(1, 1)] + k.cy * r[(2, 1)],
            k.fy * r[(1, 2)] + k.cy * r[(2, 2)],
            k.fy * t.y + k.cy * t.z,
        ];
        let p2 = [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
        for c in 0..4 {
            a[(2 * i, c)] = px.x * p2[c] - p0[c];
            a[(2 * i + 1, c)] = px.y * p2[c] - p1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let sv = &svd.singular_values;
    if sv[2] <= 1e-10 * sv[0].max(1e-300) {
        return None; // rays effectively parallel
    }
    let h = vt.row(3);
    if h[3].abs() < 1e-12 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

pub fn evaluate_tracks(
    tracks: &[FeatureTrack],
    poses: &BTreeMap<usize, CameraPose>,
    k: &CameraIntrinsics,
    dt: f64,
    thresholds: &[f64],
) -> Vec<TrackEvaluation> {
    tracks
        .iter()
        .map(|track| {
            let usable: Vec<(&CameraPose, Vector2<f64>, usize)> = track
                .samples
                .iter()
                .filter_map(|s| {
                    poses
                        .get(&s.window)
                        .map(|p| (p, Vector2::new(s.u, s.v), s.window))
                })
                .collect();
            if usable.len() < 2 {
                return TrackEvaluation {
                    track_id: track.track_id,
                    n_samples: track.samples.len(),
                    excluded: true,
                    per_threshold: Vec::new(),
                };
            }
            let pairs: Vec<(&CameraPose, Vector2<f64>)> =
                usable.iter().map(|(p, px, _)| (*p, *px)).collect();
            let Some(point) = dlt_triangulate(&pairs, k) else {
                return TrackEvaluation {
                    track_id: track.track_id,
                    n_samples: track.samples.len(),
                    excluded: true,
                    per_threshold: Vec::new(),
                };
            };
            let errors: Vec<(usize, f64)> = usable
                .iter()
                .map(|(pose, px, window)| {
                    let err = match pose.project(&point, k) {
                        Ok((u, v)) => (Vector2::new(u, v) - px).norm(),
                        Err(_) => f64::INFINITY,
                    };
                    (*window, err)
                })
                .collect();
            let per_threshold = thresholds
                .iter()
                .map(|&thr| {
                    let survivors: Vec<&(usize, f64)> =
                        errors.iter().filter(|(_, e)| *e <= thr).collect();
                    if survivors.is_empty() {
                        ThresholdEval {
                            threshold_px: thr,
                            rmse_px: None,
                            feature_age_s: 0.0,
                            inliers: 0,
                        }
                    } else {
                        let ss: f64 = survivors.iter().map(|(_, e)| e * e).sum();
                        let k_min = survivors.iter().map(|(w, _)| *w).min().unwrap();
                        let k_max = survivors.iter().map(|(w, _)| *w).max().unwrap();
                        ThresholdEval {
                            threshold_px: thr,
                            rmse_px: Some((ss / survivors.len() as f64).sqrt()),
                            feature_age_s: (k_max - k_min) as f64 * dt,
                            inliers: survivors.len(),
                        }
                    }
                })
                .collect();
            TrackEvaluation {
                track_id: track.track_id,
                n_samples: track.samples.len(),
                excluded: false,
                per_threshold,
            }
        })
        .collect()
}

/// RMS distance of points to their own best-fit circle; the residual of an
/// orbit-derived pose set is zero by construction.
pub fn circle_deviation(centers: &[Vector3<f64>]) -> Result<f64> {
    let (n, t_c) = fit_plane(centers)?;
    Ok(fit_circle(centers, &n, &t_c)?.rms_residual)
}

/// Side-by-side comparison of two reconstructions over one observation set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareReport {
    pub rms_a_px: f64,
    pub rms_b_px: f64,
    pub circle_deviation_a: f64,
    pub circle_deviation_b: f64,
    pub structure_rmse_a: Option<f64>,
    pub structure_rmse_b: Option<f64>,
}

pub fn compare_reconstructions(
    a: &Reconstruction,
    b: &Reconstruction,
    observations: &[Observation],
    gt: Option<(&SimScene, &[(usize, usize)])>,
) -> Result<CompareReport> {
    let rms_of = |rec: &Reconstruction| -> f64 {
        let (res, _) = residuals(
            &rec.orbit,
            &rec.landmarks,
            observations,
            &rec.intrinsics,
            rec.dt,
            1e3,
        );
        rms_px(&res)
    };
    let centers_of = |rec: &Reconstruction| -> Result<Vec<Vector3<f64>>> {
        let windows: std::collections::BTreeSet<usize> =
            observations.iter().map(|o| o.window).collect();
        windows
            .into_iter()
            .map(|k| Ok(rec.window_pose(k)?.center()))
            .collect()
    };
    let structure = |rec: &Reconstruction| -> Option<f64> {
        let (scene, corr) = gt?;
        let gt_pts: Vec<Vector3<f64>> = scene.landmarks.iter().map(|l| l.position).collect();
        align_similarity(&rec.landmarks, &gt_pts, corr)
            .ok()
            .map(|a| a.rmse)
    };
    Ok(CompareReport {
        rms_a_px: rms_of(a),
        rms_b_px: rms_of(b),
        circle_deviation_a: circle_deviation(&centers_of(a)?)?,
        circle_deviation_b: circle_deviation(&centers_of(b)?)?,
        structure_rmse_a: structure(a),
        structure_rmse_b: structure(b),
    })
}

// --- artifact writers ------------------------------------------------------

/// Reconstruction summary as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionJson {
    pub orbit: OrbitParamsJson,
    pub dt: f64,
    pub rms_reprojection: f64,
    pub converged: bool,
    pub iterations: usize,
    pub landmark_count: usize,
    pub intrinsics: CameraIntrinsics,
}

pub fn save_reconstruction<P: AsRef<Path>>(rec: &Reconstruction, path: P) -> Result<()> {
    let dto = ReconstructionJson {
        orbit: OrbitParamsJson::from(&rec.orbit),
        dt: rec.dt,
        rms_reprojection: rec.rms_reprojection,
        converged: rec.converged,
        iterations: rec.iterations,
        landmark_count: rec.landmarks.len(),
        intrinsics: rec.intrinsics,
    };
    fs::write(path, serde_json::to_string_pretty(&dto)?)?;
    Ok(())
}

pub fn load_reconstruction<P: AsRef<Path>>(
    json_path: P,
    ply_path: Option<&Path>,
) -> Result<Reconstruction> {
    let dto: ReconstructionJson = serde_json::from_str(&fs::read_to_string(json_path)?)?;
    let landmarks = match ply_path {
        Some(p) => load_ply(p)?,
        None => Vec::new(),
    };
    let mut rec = Reconstruction::initial(dto.orbit.to_orbit()?, landmarks, dto.intrinsics, dto.dt);
    rec.rms_reprojection = dto.rms_reprojection;
    rec.converged = dto.converged;
    rec.iterations = dto.iterations;
    Ok(rec)
}

/// ASCII PLY point cloud, `x y z` per vertex in double precision.
pub fn save_ply<P: AsRef<Path>>(points: &[Vector3<f64>], path: P) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", points.len()).expect("write");
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_ply<P: AsRef<Path>>(path: P) -> Result<Vec<Vector3<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut count: Option<usize> = None;
    for (i, line) in lines.by_ref() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad vertex count '{rest}'"),
            })?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::Validation("ply without vertex element".into()))?;
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "vertex row needs x y z".into(),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad coordinate '{s}'"),
            })
        };
        points.push(Vector3::new(
            parse(fields[0])?,
            parse(fields[1])?,
            parse(fields[2])?,
        ));
        if points.len() == count {
            break;
        }
    }
    if points.len() != count {
        return Err(Error::Validation(format!(
            "ply declared {count} vertices, found {}",
            points.len()
        )));
    }
    Ok(points)
}

fn save_csv_rows<P: AsRef<Path>>(path: P, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn residual_histogram(res: &[Vector2<f64>], bins: usize) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = res.iter().map(|r| r.norm()).collect();
    let max = norms.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for n in &norms {
        let b = ((n / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| vec![b as f64 * width, (b + 1) as f64 * width, c as f64])
        .collect()
}

// --- the pipeline ----------------------------------------------------------

/// Everything a pipeline run produced, for callers that want more than the
/// metrics file.
pub struct PipelineOutput {
    pub reconstruction: Reconstruction,
    pub initial: Reconstruction,
    pub metrics: MetricsReport,
    pub tracks: Vec<FeatureTrack>,
    pub observations: Vec<Observation>,
    /// Original track id per landmark.
    pub landmark_tracks: Vec<usize>,
    pub frequency: FrequencyEstimate,
}

/// Runs the full pipeline per `config`, writing all artifacts into
/// `config.out_dir`. A `status.json` marks the run complete or names the
/// failed stage so partial artifacts are recognizable.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    fs::create_dir_all(&config.out_dir)?;
    let result = run_pipeline_inner(config);
    let status = StatusFile {
        ok: result.is_ok(),
        failed_stage: result.as_ref().err().map(|e| match e {
            Error::Stage { stage, .. } => (*stage).to_string(),
            _ => "setup".to_string(),
        }),
    };
    fs::write(
        config.out_dir.join("status.json"),
        serde_json::to_string_pretty(&status)?,
    )?;
    result
}

fn run_pipeline_inner(config: &PipelineConfig) -> Result<PipelineOutput> {
    // Ground truth sidecar, when present.
    let sidecar: Option<GtSidecar> = match &config.gt {
        Some(path) => Some(stage("load_gt", crate::sim::load_gt_sidecar(path))?),
        None => None,
    };
    let scene: Option<SimScene> = match &sidecar {
        Some(s) => Some(stage("load_gt", s.scene.build())?),
        None => None,
    };

    let (width, height) = match (&scene, config.sensor_width, config.sensor_height) {
        (_, Some(w), Some(h)) => (w, h),
        (Some(s), _, _) => (s.width, s.height),
        _ => {
            return Err(Error::stage(
                "load_events",
                Error::Validation("sensor size unknown: pass sensor_width/height or gt".into()),
            ))
        }
    };
    let intrinsics = match (config.intrinsics, &scene) {
        (Some(k), _) => k,
        (None, Some(s)) => s.intrinsics,
        _ => {
            return Err(Error::stage(
                "load_events",
                Error::Validation("intrinsics unknown: pass intrinsics or gt".into()),
            ))
        }
    };

    let stream = stage(
        "load_events",
        load_events(&config.events, EventFormat::Csv, width, height).and_then(|s| {
            if s.is_empty() {
                Err(Error::EmptyStream("event file contains no events".into()))
            } else {
                Ok(s)
            }
        }),
    )?;

    let dt = config.tracker.dt;
    stage("load_events", config.tracker.validate())?;

    // Tracks.
    let (tracks, clusters): (Vec<FeatureTrack>, Vec<Cluster>) = match &config.track_source {
        TrackSource::Events => {
            let corners = stage("detect_corners", Ok(detect_corners(&stream)))?;
            let dense = stage(
                "density_filter",
                Ok(density_filter(&corners, &stream, &config.tracker)),
            )?;
            let clusters = stage("cluster_corners", cluster_corners(&dense, &config.tracker))?;
            let merged = stage(
                "merge_clusters",
                Ok(merge_clusters(
                    clusters,
                    config.tracker.phi,
                    config.tracker.n_sigma,
                    config.tracker.time_scale,
                )),
            )?;
            let tracks = stage(
                "extract_tracks",
                extract_tracks(&merged, dt, stream.t_first(), stream.duration()),
            )?;
            (tracks, merged)
        }
        TrackSource::GtObservations { sigma_px } => {
            let scene = scene.as_ref().ok_or_else(|| {
                Error::stage(
                    "extract_tracks",
                    Error::Validation("gt_observations track source requires gt".into()),
                )
            })?;
            let obs = stage("extract_tracks", gt_observations(scene, dt, *sigma_px))?;
            (tracks_from_observations(&obs), Vec::new())
        }
    };
    if tracks.is_empty() {
        return Err(Error::stage(
            "extract_tracks",
            Error::Validation("no usable feature tracks".into()),
        ));
    }
    let observations = observations_from_tracks(&tracks);

    // Frequency initialization.
    let frequency = stage("estimate_frequency", estimate_frequency(&stream, config.dt_f))?;
    if !frequency.dominant {
        return Err(Error::stage(
            "estimate_frequency",
            Error::Validation("no dominant frequency in the stream".into()),
        ));
    }

    // Initial poses.
    let observed_windows: std::collections::BTreeSet<usize> =
        observations.iter().map(|o| o.window).collect();
    let init_poses: PoseSet = match &config.init {
        InitSource::ColmapModel { dir } => {
            let model = stage("init_poses", colmap::load_model(dir))?;
            model.pose_set(dt)
        }
        InitSource::SimulatorGt | InitSource::PerturbedGt => {
            let scene = scene.as_ref().ok_or_else(|| {
                Error::stage(
                    "init_poses",
                    Error::Validation("simulator init sources require gt".into()),
                )
            })?;
            let mut poses = Vec::new();
            for &k in &observed_windows {
                let t = k as f64 * dt;
                poses.push(TimedPose {
                    t,
                    pose: stage("init_poses", orbit_pose(t, &scene.orbit))?,
                });
            }
            let poses = PoseSet::new(poses);
            match config.init {
                InitSource::PerturbedGt => {
                    perturb_poses(&poses, 5.0, 0.05, scene.orbit.r, config.seed)
                }
                _ => poses,
            }
        }
    };

    let init_orbit_params = stage("init_orbit", init_orbit(&init_poses, frequency.f_hz))?;

    // Landmarks from tracks under the initial orbit.
    let (landmarks, landmark_tracks, solve_obs) = stage(
        "triangulate",
        triangulate_landmarks(&observations, &init_orbit_params, &intrinsics, dt),
    )?;

    let mut opts = config.optimizer.clone();
    opts.dt = dt;
    let initial = {
        let mut rec =
            Reconstruction::initial(init_orbit_params.clone(), landmarks.clone(), intrinsics, dt);
        let (res, _) = residuals(&rec.orbit, &rec.landmarks, &solve_obs, &intrinsics, dt, 1e3);
        rec.rms_reprojection = rms_px(&res);
        rec
    };
    let reconstruction = stage("optimize", optimize(&initial, &solve_obs, &opts))?;

    // Metrics.
    let metrics = stage(
        "metrics",
        build_metrics(
            config,
            &stream,
            &tracks,
            &clusters,
            sidecar.as_ref(),
            scene.as_ref(),
            &initial,
            &reconstruction,
            &landmark_tracks,
            &frequency,
            solve_obs.len(),
        ),
    )?;

    // Artifacts.
    stage("write_outputs", {
        let out = &config.out_dir;
        crate::tracker::save_tracks(&tracks, dt, out.join("tracks.csv"))?;
        save_reconstruction(&reconstruction, out.join("reconstruction.json"))?;
        save_ply(&reconstruction.landmarks, out.join("cloud.ply"))?;
        fs::write(
            out.join("metrics.json"),
            serde_json::to_string_pretty(&metrics)?,
        )?;
        let spectrum_rows: Vec<Vec<f64>> = frequency
            .spectrum
            .iter()
            .map(|&(f, p)| vec![f, p])
            .collect();
        save_csv_rows(out.join("spectrum.csv"), "freq_hz,power", &spectrum_rows)?;
        let (res, _) = residuals(
            &reconstruction.orbit,
            &reconstruction.landmarks,
            &solve_obs,
            &intrinsics,
            dt,
            1e3,
        );
        save_csv_rows(
            out.join("residual_hist.csv"),
            "bin_lo_px,bin_hi_px,count",
            &residual_histogram(&res, 50),
        )?;
        if let Ok(((x0, y0), (x1, y1))) =
            screw_line(&reconstruction.orbit, &intrinsics, width, height)
        {
            save_csv_rows(
                out.join("screw_line.csv"),
                "x,y",
                &[vec![x0, y0], vec![x1, y1]],
            )?;
        }
        Ok(())
    })?;

    Ok(PipelineOutput {
        reconstruction,
        initial,
        metrics,
        tracks,
        observations,
        landmark_tracks,
        frequency,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_metrics(
    config: &PipelineConfig,
    stream: &EventStream,
    tracks: &[FeatureTrack],
    clusters: &[Cluster],
    sidecar: Option<&GtSidecar>,
    scene: Option<&SimScene>,
    initial: &Reconstruction,
    refined: &Reconstruction,
    landmark_tracks: &[usize],
    frequency: &FrequencyEstimate,
    observation_count: usize,
) -> Result<MetricsReport> {
    let dt = config.tracker.dt;
    let gt_hz = scene.map(|s| s.orbit.f);
    let rel_error = gt_hz.map(|f| (refined.orbit.f - f).abs() / f);
    let axis_error_deg = scene.map(|s| axis_angle_deg(&refined.orbit.n, &s.orbit.n));

    // Feature age across all tracks (full sample span).
    let mut ages: Vec<f64> = tracks
        .iter()
        .map(|t| {
            let k0 = t.samples.first().map_or(0, |s| s.window);
            let k1 = t.samples.last().map_or(0, |s| s.window);
            (k1 - k0) as f64 * dt
        })
        .collect();
    ages.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let feature_age = FeatureAgeMetrics {
        mean_s: if ages.is_empty() {
            0.0
        } else {
            ages.iter().sum::<f64>() / ages.len() as f64
        },
        median_s: if ages.is_empty() {
            0.0
        } else {
            ages[ages.len() / 2]
        },
    };

    // Purity against the event associations (event-tracker runs only).
    let purity = match (sidecar, clusters.is_empty()) {
        (Some(sc), false) => {
            let p = track_purity(tracks, clusters, stream, &sc.associations);
            let n = p.len();
            let pure = p.iter().filter(|(_, purity, _)| *purity >= 0.9).count();
            Some(PurityMetrics {
                tracks: n,
                fraction_pure_90: pure as f64 / n.max(1) as f64,
                mean_purity: p.iter().map(|(_, x, _)| x).sum::<f64>() / n.max(1) as f64,
            })
        }
        _ => None,
    };

    // Structure vs ground truth landmarks, when a correspondence exists.
    let (structure_rmse, structure_rmse_pct_diameter, axis_error_aligned_deg) = match (scene, sidecar)
    {
        (Some(scene), sidecar) => {
            let corr: Vec<(usize, usize)> = match &config.track_source {
                // landmark_tracks holds positions into `tracks`, whose
                // track_id is the generating landmark for gt observations.
                TrackSource::GtObservations { .. } => landmark_tracks
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &pos)| tracks.get(pos).map(|t| (i, t.track_id)))
                    .collect(),
                TrackSource::Events => {
                    let assoc = sidecar.map(|s| s.associations.as_slice()).unwrap_or(&[]);
                    if assoc.is_empty() || clusters.is_empty() {
                        Vec::new()
                    } else {
                        let purities = track_purity(tracks, clusters, stream, assoc);
                        landmark_tracks
                            .iter()
                            .enumerate()
                            .filter_map(|(i, &track_idx)| {
                                purities
                                    .iter()
                                    .find(|(t, _, _)| *t == track_idx)
                                    .and_then(|(_, purity, majority)| {
                                        if *purity >= 0.5 {
                                            majority.map(|lm| (i, lm))
                                        } else {
                                            None
                                        }
                                    })
                            })
                            .collect()
                    }
                }
            };
            if corr.len() >= 3 {
                let gt_pts: Vec<Vector3<f64>> =
                    scene.landmarks.iter().map(|l| l.position).collect();
                match align_similarity(&refined.landmarks, &gt_pts, &corr) {
                    Ok(a) => {
                        let d = scene.object_diameter();
                        let n_aligned = nalgebra::Unit::new_normalize(
                            a.rotation * refined.orbit.n.into_inner(),
                        );
                        (
                            Some(a.rmse),
                            (d > 0.0).then(|| 100.0 * a.rmse / d),
                            Some(axis_angle_deg(&n_aligned, &scene.orbit.n)),
                        )
                    }
                    Err(_) => (None, None, None),
                }
            } else {
                (None, None, None)
            }
        }
        _ => (None, None, None),
    };

    // Track evaluation against ground-truth poses. Event-derived tracks are
    // window means, so they are compared against poses at the window
    // midpoint; ground-truth observations are taken at the window start.
    let track_eval = scene.map(|scene| {
        let offset = match &config.track_source {
            TrackSource::Events => stream.t_first() + 0.5 * dt,
            TrackSource::GtObservations { .. } => 0.0,
        };
        let mut poses: BTreeMap<usize, CameraPose> = BTreeMap::new();
        for k in 1..=scene.window_count(dt) {
            if let Ok(p) = orbit_pose(k as f64 * dt + offset, &scene.orbit) {
                poses.insert(k, p);
            }
        }
        let evals = evaluate_tracks(tracks, &poses, &scene.intrinsics, dt, &[3.0, 5.0, 7.0]);
        [3.0, 5.0, 7.0]
            .iter()
            .enumerate()
            .map(|(ti, &thr)| {
                let mut rmses: Vec<f64> = Vec::new();
                let mut ages: Vec<f64> = Vec::new();
                for e in evals.iter().filter(|e| !e.excluded) {
                    if let Some(r) = e.per_threshold[ti].rmse_px {
                        rmses.push(r);
                        ages.push(e.per_threshold[ti].feature_age_s);
                    }
                }
                rmses.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ThresholdSummary {
                    threshold_px: thr,
                    evaluated_tracks: rmses.len(),
                    median_rmse_px: (!rmses.is_empty()).then(|| rmses[rmses.len() / 2]),
                    mean_rmse_px: (!rmses.is_empty())
                        .then(|| rmses.iter().sum::<f64>() / rmses.len() as f64),
                    mean_feature_age_s: (!ages.is_empty())
                        .then(|| ages.iter().sum::<f64>() / ages.len() as f64),
                }
            })
            .collect()
    });

    Ok(MetricsReport {
        frequency: FrequencyMetrics {
            fft_hz: frequency.f_hz,
            optimized_hz: refined.orbit.f,
            gt_hz,
            rel_error,
        },
        axis_error_deg,
        axis_error_aligned_deg,
        rms_reprojection: RmsMetrics {
            initial_px: initial.rms_reprojection,
            optimized_px: refined.rms_reprojection,
        },
        structure_rmse,
        structure_rmse_pct_diameter,
        converged: refined.converged,
        track_count: tracks.len(),
        landmark_count: refined.landmarks.len(),
        observation_count,
        feature_age,
        track_eval,
        purity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip() {
        let pts = vec![
            Vector3::new(0.125, -3.5, 7.0),
            Vector3::new(1e-9, 2.25, -0.75),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        save_ply(&pts, &path).unwrap();
        let back = load_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn histogram_covers_all_residuals() {
        let res = vec![
            Vector2::new(0.1, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 2.0),
        ];
        let rows = residual_histogram(&res, 10);
        let total: f64 = rows.iter().map(|r| r[2]).sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn dlt_recovers_point_from_exact_projections() {
        use crate::orbit::tests_support::sample_orbit;
        let orbit = sample_orbit();
        let k = CameraIntrinsics::new(250.0, 250.0, 173.0, 130.0);
        let point = orbit.c + Vector3::new(0.1, -0.05, 0.2);
        let mut pairs = Vec::new();
        let mut poses = Vec::new();
        for w in 1..=20usize {
            if let Ok(p) = orbit_pose(w as f64 * 0.030, &orbit) {
                poses.push(p);
            }
        }
        for p in &poses {
            if let Ok((u, v)) = p.project(&point, &k) {
                pairs.push((p, Vector2::new(u, v)));
            }
        }
        assert!(pairs.len() >= 2);
        let est = dlt_triangulate(&pairs, &k).unwrap();
        assert!((est - point).norm() < 1e-9);
    }
}
