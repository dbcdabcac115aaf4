//! End-to-end pipeline tests over real artifact files: simulate a scene to
//! disk, run the full pipeline, and check the outputs and their round-trips.

use std::path::Path;

use nalgebra::Vector3;
use orbitsfm_core::camera::CameraIntrinsics;
use orbitsfm_core::error::Error;
use orbitsfm_core::orbit::{OrbitParams, Reconstruction};
use orbitsfm_core::pipeline::{
    compare_reconstructions, load_reconstruction, run_pipeline, InitSource, PipelineConfig,
    TrackSource,
};
use orbitsfm_core::sim::{
    gt_events, gt_observations, make_scene, observed_subset, save_gt_sidecar, GtSidecar,
    ObjectPreset, OrbitParamsJson, SceneSpec, SimEventConfig, SimScene,
};
use orbitsfm_core::solver::{optimize, OptimizeOpts};
use orbitsfm_core::tracker::TrackerConfig;
use orbitsfm_core::{save_events, Event, EventStream};

const SENSOR: (u16, u16) = (346, 260);

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(250.0, 250.0, 173.0, 130.0)
}

fn tracker_scene_spec(seed: u64) -> SceneSpec {
    let orbit = OrbitParams::new(
        1.0,
        0.5,
        nalgebra::Rotation3::identity(),
        nalgebra::Unit::new_normalize(Vector3::new(0.05, -0.03, 1.0)),
        Vector3::x(),
        Vector3::new(0.1, 0.05, 0.2),
    )
    .unwrap();
    SceneSpec {
        preset: ObjectPreset::RandomBlob {
            count: 8,
            radius: 0.35,
            off_axis: 0.2,
        },
        orbit: OrbitParamsJson::from(&orbit),
        duration: 4.0,
        seed,
        intrinsics: intrinsics(),
        sensor_width: SENSOR.0,
        sensor_height: SENSOR.1,
        events: SimEventConfig {
            events_per_landmark_per_second: 8000.0,
            background_noise_rate: 200.0,
            pixel_jitter: 0.8,
            ..Default::default()
        },
    }
}

/// Simulates a scene to disk: events.csv plus the gt sidecar. Returns the
/// built scene.
fn simulate_to_disk(spec: &SceneSpec, dir: &Path) -> SimScene {
    let scene = spec.build().unwrap();
    let (stream, associations) = gt_events(&scene, &spec.events).unwrap();
    save_events(&stream, dir.join("events.csv")).unwrap();
    let sidecar = GtSidecar {
        scene: spec.clone(),
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
    save_gt_sidecar(&sidecar, dir.join("gt.json")).unwrap();
    scene
}

fn base_config(dir: &Path, init: InitSource, track_source: TrackSource) -> PipelineConfig {
    PipelineConfig {
        events: dir.join("events.csv"),
        gt: Some(dir.join("gt.json")),
        sensor_width: None,
        sensor_height: None,
        intrinsics: None,
        tracker: TrackerConfig::default(),
        dt_f: 0.020,
        init,
        track_source,
        optimizer: OptimizeOpts::default(),
        out_dir: dir.join("out"),
        seed: 3,
    }
}

#[test]
fn full_event_pipeline_recovers_motion() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tracker_scene_spec(11);
    let scene = simulate_to_disk(&spec, dir.path());

    let config = base_config(dir.path(), InitSource::SimulatorGt, TrackSource::Events);
    let out = run_pipeline(&config).unwrap();

    // Motion quality.
    let m = &out.metrics;
    assert!(m.converged);
    // Tracker tracks are windowed means of corner events; the residual
    // frequency bias sits at the percent level, unlike the sub-percent
    // recovery from direct observations.
    let f_rel = m.frequency.rel_error.unwrap();
    assert!(f_rel < 0.03, "f relative error {f_rel}");
    // Ground-truth init anchors the frame, so the raw axis is the tight
    // check; the aligned one passes through the (noisier) tracker-built
    // structure.
    assert!(
        m.axis_error_deg.unwrap_or(90.0) < 2.0,
        "axis error {:?}",
        m.axis_error_deg
    );
    assert!(
        m.axis_error_aligned_deg.unwrap_or(90.0) < 5.0,
        "aligned axis error {:?}",
        m.axis_error_aligned_deg
    );
    assert!(m.rms_reprojection.optimized_px < 2.0);
    assert!(m.track_count >= scene.landmarks.len() / 2);
    assert!(m.purity.as_ref().unwrap().fraction_pure_90 >= 0.8);

    // Artifacts exist and parse back.
    let out_dir = dir.path().join("out");
    for name in [
        "tracks.csv",
        "reconstruction.json",
        "cloud.ply",
        "metrics.json",
        "spectrum.csv",
        "residual_hist.csv",
        "status.json",
    ] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    let status: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("status.json")).unwrap())
            .unwrap();
    assert_eq!(status["ok"], serde_json::Value::Bool(true));

    let rec = load_reconstruction(
        out_dir.join("reconstruction.json"),
        Some(&out_dir.join("cloud.ply")),
    )
    .unwrap();
    assert_eq!(rec.landmarks.len(), out.reconstruction.landmarks.len());
    assert!((rec.orbit.f - out.reconstruction.orbit.f).abs() < 1e-12);

    let tracks = orbitsfm_core::tracker::load_tracks(out_dir.join("tracks.csv")).unwrap();
    assert_eq!(tracks.len(), out.tracks.len());

    // Metrics JSON round-trips through its own schema.
    let metrics_back: orbitsfm_core::MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(&metrics_back, m);
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tracker_scene_spec(13);
    simulate_to_disk(&spec, dir.path());

    let mut config_a = base_config(dir.path(), InitSource::PerturbedGt, TrackSource::Events);
    config_a.out_dir = dir.path().join("out_a");
    let mut config_b = config_a.clone();
    config_b.out_dir = dir.path().join("out_b");

    run_pipeline(&config_a).unwrap();
    run_pipeline(&config_b).unwrap();

    let a = std::fs::read(dir.path().join("out_a/metrics.json")).unwrap();
    let b = std::fs::read(dir.path().join("out_b/metrics.json")).unwrap();
    assert_eq!(a, b, "metrics.json must be bit-identical across reruns");

    let ra = std::fs::read(dir.path().join("out_a/reconstruction.json")).unwrap();
    let rb = std::fs::read(dir.path().join("out_b/reconstruction.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn noiseless_gt_tracks_reach_global_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tracker_scene_spec(17);
    spec.preset = ObjectPreset::RandomBlob {
        count: 30,
        radius: 0.3,
        off_axis: 0.1,
    };
    spec.orbit = {
        let orbit = OrbitParams::new(
            1.0,
            1.5,
            nalgebra::Rotation3::identity(),
            nalgebra::Unit::new_normalize(Vector3::new(0.05, -0.03, 1.0)),
            Vector3::x(),
            Vector3::new(0.1, 0.05, 0.2),
        )
        .unwrap();
        OrbitParamsJson::from(&orbit)
    };
    spec.duration = 3.0;
    simulate_to_disk(&spec, dir.path());

    let config = base_config(
        dir.path(),
        InitSource::SimulatorGt,
        TrackSource::GtObservations { sigma_px: 0.0 },
    );
    let out = run_pipeline(&config).unwrap();
    assert!(
        out.reconstruction.rms_reprojection < 1e-6,
        "rms {}",
        out.reconstruction.rms_reprojection
    );
}

/// The documented reference run: 50 landmarks, f = 1.5 Hz, T = 4 s,
/// sigma = 0.5 px observations, perturbed pose init. Frequency must come
/// back within 1% and the axis within 2 degrees.
#[test]
fn pipeline_perturbed_gt_reference_run() {
    let dir = tempfile::tempdir().unwrap();
    let orbit = OrbitParams::new(
        1.0,
        1.5,
        nalgebra::Rotation3::identity(),
        nalgebra::Unit::new_normalize(Vector3::new(0.05, -0.03, 1.0)),
        Vector3::x(),
        Vector3::new(0.1, 0.05, 0.2),
    )
    .unwrap();
    let spec = SceneSpec {
        preset: ObjectPreset::RandomBlob {
            count: 50,
            radius: 0.3,
            off_axis: 0.2,
        },
        orbit: OrbitParamsJson::from(&orbit),
        duration: 4.0,
        seed: 31,
        intrinsics: intrinsics(),
        sensor_width: SENSOR.0,
        sensor_height: SENSOR.1,
        events: SimEventConfig::default(),
    };
    simulate_to_disk(&spec, dir.path());
    let config = base_config(
        dir.path(),
        InitSource::PerturbedGt,
        TrackSource::GtObservations { sigma_px: 0.5 },
    );
    let out = run_pipeline(&config).unwrap();
    let m = &out.metrics;
    assert!(m.frequency.rel_error.unwrap() < 0.01, "{:?}", m.frequency);
    assert!(m.axis_error_deg.unwrap() < 2.0);
    assert!(m.axis_error_aligned_deg.unwrap() < 2.0);
    assert!(m.rms_reprojection.optimized_px < 0.8);
    assert!(m.rms_reprojection.optimized_px > 0.3);
    assert!(m.structure_rmse_pct_diameter.unwrap() < 2.0);
}

#[test]
fn empty_event_file_fails_at_load_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("events.csv"), "t,x,y,p\n").unwrap();
    let mut config = base_config(dir.path(), InitSource::SimulatorGt, TrackSource::Events);
    config.gt = None;
    config.sensor_width = Some(SENSOR.0);
    config.sensor_height = Some(SENSOR.1);
    config.intrinsics = Some(intrinsics());
    match run_pipeline(&config) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load_events"),
        Err(other) => panic!("expected load_events stage error, got {other:?}"),
        Ok(_) => panic!("expected load_events stage error, got success"),
    }
    // The status file flags the incomplete run.
    let status: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/status.json")).unwrap())
            .unwrap();
    assert_eq!(status["ok"], serde_json::Value::Bool(false));
    assert_eq!(status["failed_stage"], "load_events");
}

#[test]
fn compare_reports_zero_circle_deviation_and_is_deterministic() {
    let dt = 0.030;
    let scene = make_scene(
        &ObjectPreset::RandomBlob {
            count: 20,
            radius: 0.3,
            off_axis: 0.1,
        },
        tracker_scene_spec(19).orbit.to_orbit().unwrap(),
        3.0,
        19,
        intrinsics(),
        SENSOR.0,
        SENSOR.1,
    );
    let obs_all = gt_observations(&scene, dt, 0.5).unwrap();
    let (obs, kept) = observed_subset(&obs_all, scene.landmarks.len(), 2);
    let landmarks: Vec<Vector3<f64>> = kept
        .iter()
        .map(|&p| scene.landmarks[p].position)
        .collect();
    let a = {
        let mut rec =
            Reconstruction::initial(scene.orbit.clone(), landmarks.clone(), intrinsics(), dt);
        rec.rms_reprojection = 0.0;
        rec
    };
    let b = optimize(&a, &obs, &OptimizeOpts::default()).unwrap();

    let corr: Vec<(usize, usize)> = kept.iter().enumerate().map(|(i, &p)| (i, p)).collect();
    let report = compare_reconstructions(&a, &b, &obs, Some((&scene, &corr))).unwrap();
    // Orbit-derived poses sit exactly on their own circle.
    assert!(report.circle_deviation_a < 1e-9);
    assert!(report.circle_deviation_b < 1e-9);
    assert!(report.rms_b_px <= report.rms_a_px + 1e-12);
    assert!(report.structure_rmse_b.unwrap() < 0.01);

    let again = compare_reconstructions(&a, &b, &obs, Some((&scene, &corr))).unwrap();
    assert_eq!(report, again);
}

#[test]
fn colmap_init_source_runs_through_pipeline() {
    use std::fmt::Write as _;
    let dir = tempfile::tempdir().unwrap();
    let spec = tracker_scene_spec(23);
    let scene = simulate_to_disk(&spec, dir.path());

    // Write a COLMAP text model of the ground-truth poses.
    let model_dir = dir.path().join("colmap");
    std::fs::create_dir_all(&model_dir).unwrap();
    let k = intrinsics();
    std::fs::write(
        model_dir.join("cameras.txt"),
        format!(
            "1 PINHOLE {} {} {} {} {} {}\n",
            SENSOR.0, SENSOR.1, k.fx, k.fy, k.cx, k.cy
        ),
    )
    .unwrap();
    let mut images = String::new();
    let dt = TrackerConfig::default().dt;
    for w in 1..=scene.window_count(dt) {
        let pose = orbitsfm_core::orbit::orbit_pose(w as f64 * dt, &scene.orbit).unwrap();
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&pose.rotation);
        writeln!(
            images,
            "{w} {} {} {} {} {} {} {} 1 win_{w:06}.png\n",
            q.w, q.i, q.j, q.k, pose.translation.x, pose.translation.y, pose.translation.z
        )
        .unwrap();
    }
    std::fs::write(model_dir.join("images.txt"), images).unwrap();
    std::fs::write(model_dir.join("points3D.txt"), "").unwrap();

    let config = base_config(
        dir.path(),
        InitSource::ColmapModel { dir: model_dir },
        TrackSource::Events,
    );
    let out = run_pipeline(&config).unwrap();
    assert!(out.metrics.frequency.rel_error.unwrap() < 0.03);
    assert!(out.metrics.axis_error_deg.unwrap() < 2.0);
}

/// The estimated screw line (image projection of the spin axis) stays
/// within 2 px of where the true axis projects, after refinement from noisy
/// observations.
#[test]
fn screw_line_close_to_ground_truth_after_solve() {
    let dt = 0.030;
    let scene = make_scene(
        &ObjectPreset::RandomBlob {
            count: 40,
            radius: 0.3,
            off_axis: 0.1,
        },
        tracker_scene_spec(37).orbit.to_orbit().unwrap(),
        4.0,
        37,
        intrinsics(),
        SENSOR.0,
        SENSOR.1,
    );
    let obs_all = gt_observations(&scene, dt, 0.5).unwrap();
    let (obs, kept) = observed_subset(&obs_all, scene.landmarks.len(), 2);
    let landmarks: Vec<Vector3<f64>> = kept
        .iter()
        .map(|&p| scene.landmarks[p].position)
        .collect();
    let init = Reconstruction::initial(scene.orbit.clone(), landmarks, intrinsics(), dt);
    let out = optimize(&init, &obs, &OptimizeOpts::default()).unwrap();

    let ((x0, y0), (x1, y1)) =
        orbitsfm_core::orbit::screw_line(&out.orbit, &intrinsics(), SENSOR.0, SENSOR.1).unwrap();
    // Distance of true axis sample projections to the estimated line.
    let dir = (x1 - x0, y1 - y0);
    let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
    let gt_pose = orbitsfm_core::orbit::orbit_pose(0.0, &scene.orbit).unwrap();
    for i in -5..=5 {
        let sample = scene.orbit.c + 0.1 * i as f64 * scene.orbit.n.into_inner();
        let Ok((u, v)) = gt_pose.project(&sample, &intrinsics()) else {
            continue;
        };
        let dist = ((u - x0) * dir.1 - (v - y0) * dir.0).abs() / len;
        assert!(dist < 2.0, "axis sample {i} is {dist:.2} px from the screw line");
    }
}

/// Noiseless ground-truth tracks evaluate to zero RMSE over the full
/// visibility span; single-sample tracks are excluded.
#[test]
fn evaluate_tracks_noiseless_and_degenerate_cases() {
    use orbitsfm_core::pipeline::evaluate_tracks;
    use orbitsfm_core::tracker::{FeatureTrack, TrackSample};

    let dt = 0.030;
    let scene = make_scene(
        &ObjectPreset::RandomBlob {
            count: 10,
            radius: 0.3,
            off_axis: 0.1,
        },
        tracker_scene_spec(41).orbit.to_orbit().unwrap(),
        3.0,
        41,
        intrinsics(),
        SENSOR.0,
        SENSOR.1,
    );
    let obs = gt_observations(&scene, dt, 0.0).unwrap();
    let mut by_track: std::collections::BTreeMap<usize, Vec<TrackSample>> = Default::default();
    for o in &obs {
        by_track.entry(o.track).or_default().push(TrackSample {
            window: o.window,
            u: o.px.x,
            v: o.px.y,
        });
    }
    let mut tracks: Vec<FeatureTrack> = by_track
        .into_iter()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(track_id, samples)| FeatureTrack {
            track_id,
            source_cluster: track_id,
            samples,
        })
        .collect();
    // Plus one degenerate single-sample track.
    tracks.push(FeatureTrack {
        track_id: 999,
        source_cluster: 999,
        samples: vec![TrackSample {
            window: 5,
            u: 100.0,
            v: 100.0,
        }],
    });

    let mut poses = std::collections::BTreeMap::new();
    for w in 1..=scene.window_count(dt) {
        poses.insert(
            w,
            orbitsfm_core::orbit::orbit_pose(w as f64 * dt, &scene.orbit).unwrap(),
        );
    }
    let evals = evaluate_tracks(&tracks, &poses, &intrinsics(), dt, &[3.0, 5.0, 7.0]);
    for e in &evals {
        if e.track_id == 999 {
            assert!(e.excluded, "single-sample track must be excluded");
            continue;
        }
        assert!(!e.excluded);
        let track = tracks.iter().find(|t| t.track_id == e.track_id).unwrap();
        let span = (track.samples.last().unwrap().window - track.samples[0].window) as f64 * dt;
        for th in &e.per_threshold {
            assert!(th.rmse_px.unwrap() < 1e-6, "noiseless rmse {:?}", th.rmse_px);
            assert!((th.feature_age_s - span).abs() < 1e-9);
        }
    }
}

#[test]
fn out_of_order_event_file_is_resorted_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let events = vec![
        Event::new(0.5, 10, 10, 1),
        Event::new(0.25, 11, 11, -1),
    ];
    // Bypass the sorting constructor to write an unsorted file.
    let mut stream = EventStream::new(events, 64, 48);
    stream.events.swap(0, 1);
    save_events(&stream, dir.path().join("e.csv")).unwrap();
    let loaded =
        orbitsfm_core::load_events(dir.path().join("e.csv"), orbitsfm_core::EventFormat::Csv, 64, 48)
            .unwrap();
    assert!(loaded.resorted);
    assert!(loaded.events[0].t <= loaded.events[1].t);
}
