//! Recovery of spin rate, rotation axis and sparse 3D structure of a
//! spinning object observed by a static event camera.
//!
//! A static camera watching a spinning object is equivalent to a camera
//! orbiting a static object on a circle, which pins every camera pose down
//! to a 14-parameter motion model. The crate provides the full chain:
//!
//! * [`event`] — event streams, CSV/text I/O, surface of active events;
//! * [`tracker`] — corner detection, density filtering, spatio-temporal
//!   clustering and windowed feature-track extraction;
//! * [`init`] — plane/circle fits to camera centers, FFT spin-rate
//!   estimation and orbit initialization;
//! * [`orbit`] / [`solver`] — the orbit camera model and the joint
//!   Levenberg-Marquardt refinement of motion and structure;
//! * [`sim`] — a deterministic spinning-object simulator used as ground
//!   truth in the test suite;
//! * [`pipeline`] — end-to-end orchestration, metrics and artifact files;
//! * [`colmap`] — import of COLMAP text models as an initialization source.

pub mod camera;
pub mod colmap;
pub mod error;
pub mod event;
pub mod geometry;
pub mod init;
pub mod orbit;
pub mod pipeline;
pub mod reference;
pub mod sim;
pub mod solver;
pub mod tracker;

pub use camera::{CameraIntrinsics, CameraPose, PoseSet, TimedPose};
pub use error::{Error, Result};
pub use event::{load_events, save_events, Event, EventFormat, EventStream, Sae};
pub use init::{estimate_frequency, fit_circle, fit_plane, init_orbit, CircleFit};
pub use orbit::{
    orbit_center, orbit_pose, reproject, residuals, rms_px, screw_line, Landmarks, Observation,
    OrbitParams, Reconstruction,
};
pub use pipeline::{run_pipeline, MetricsReport, PipelineConfig};
pub use sim::{align_similarity, gt_events, gt_observations, make_scene, ObjectPreset, SimScene};
pub use solver::{optimize, triangulate_landmarks, OptimizeOpts};
pub use tracker::{
    cluster_corners, density_filter, detect_corners, extract_tracks, merge_clusters, Cluster,
    CornerEvent, FeatureTrack, TrackerConfig,
};
