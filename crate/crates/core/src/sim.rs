//! Synthetic spinning-object scenes used as ground truth: landmark clouds
//! with outward surface normals, exact orbit poses, noiseless or noisy track
//! observations, and raw event streams with back-face self-occlusion.
//!
//! Everything is a pure function of (inputs, seed).

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraPose, PoseSet, TimedPose};
use crate::error::{Error, Result};
use crate::event::{Event, EventStream};
use crate::geometry::nearest_rotation;
use crate::orbit::{orbit_pose, OrbitParams};
use crate::orbit::Observation;

/// A simulated scene point with an outward surface normal used for the
/// back-face visibility test.
#[derive(Debug, Clone, Copy)]
pub struct SimLandmark {
    pub position: Vector3<f64>,
    pub normal: Unit<Vector3<f64>>,
}

/// Ground-truth scene: orbit, landmark cloud, camera and timing.
#[derive(Debug, Clone)]
pub struct SimScene {
    pub orbit: OrbitParams,
    pub landmarks: Vec<SimLandmark>,
    pub intrinsics: CameraIntrinsics,
    pub width: u16,
    pub height: u16,
    /// Scene duration in seconds.
    pub duration: f64,
    /// Seed that fully determines all stochastic outputs.
    pub seed: u64,
}

/// Landmark cloud presets, all centered on the orbit center.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectPreset {
    /// The 8 corners of an axis-aligned cube with half edge `half_extent`,
    /// vertex normals pointing outward.
    CubeCorners { half_extent: f64 },
    /// `count` points evenly spaced on a circle of `radius` in the orbit
    /// plane, radial normals.
    Ring { count: usize, radius: f64 },
    /// `count` points drawn on a sphere of `radius`, radial normals. The
    /// sphere sits `off_axis` world units from the spin axis (in the orbit
    /// plane), as an object mounted off-center would.
    RandomBlob {
        count: usize,
        radius: f64,
        #[serde(default)]
        off_axis: f64,
    },
}

/// Builds the deterministic landmark cloud of a preset around the orbit
/// center.
pub fn make_scene(
    preset: &ObjectPreset,
    orbit: OrbitParams,
    duration: f64,
    seed: u64,
    intrinsics: CameraIntrinsics,
    width: u16,
    height: u16,
) -> SimScene {
    let c = orbit.c;
    let landmarks: Vec<SimLandmark> = match *preset {
        ObjectPreset::CubeCorners { half_extent } => {
            let mut pts = Vec::with_capacity(8);
            for &sx in &[-1.0, 1.0] {
                for &sy in &[-1.0, 1.0] {
                    for &sz in &[-1.0, 1.0] {
                        let offset = Vector3::new(sx, sy, sz) * half_extent;
                        pts.push(SimLandmark {
                            position: c + offset,
                            normal: Unit::new_normalize(offset),
                        });
                    }
                }
            }
            pts
        }
        ObjectPreset::Ring { count, radius } => {
            let u = orbit.u.into_inner();
            let v = orbit.v();
            (0..count)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / count as f64;
                    let radial = a.cos() * u + a.sin() * v;
                    SimLandmark {
                        position: c + radius * radial,
                        normal: Unit::new_normalize(radial),
                    }
                })
                .collect()
        }
        ObjectPreset::RandomBlob {
            count,
            radius,
            off_axis,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shift = off_axis * orbit.u.into_inner();
            (0..count)
                .map(|_| {
                    let dir = loop {
                        let v = Vector3::new(
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0f64),
                        );
                        let n = v.norm();
                        if n > 1e-3 && n <= 1.0 {
                            break v / n;
                        }
                    };
                    SimLandmark {
                        position: c + shift + radius * dir,
                        normal: Unit::new_normalize(dir),
                    }
                })
                .collect()
        }
    };
    SimScene {
        orbit,
        landmarks,
        intrinsics,
        width,
        height,
        duration,
        seed,
    }
}

impl SimScene {
    /// Number of usable windows for duration `dt`.
    pub fn window_count(&self, dt: f64) -> usize {
        ((self.duration / dt).floor() as i64 - 1).max(0) as usize
    }

    /// Ground-truth poses at times `k * dt + offset` for `k = 1..=K`.
    pub fn gt_poses(&self, dt: f64, offset: f64) -> Result<PoseSet> {
        let mut poses = Vec::new();
        for k in 1..=self.window_count(dt) {
            let t = k as f64 * dt + offset;
            poses.push(TimedPose {
                t,
                pose: orbit_pose(t, &self.orbit)?,
            });
        }
        Ok(PoseSet::new(poses))
    }

    /// Largest pairwise landmark distance.
    pub fn object_diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.landmarks.iter().enumerate() {
            for b in &self.landmarks[i + 1..] {
                best = best.max((a.position - b.position).norm());
            }
        }
        best
    }
}

/// Visibility of a landmark from a camera pose: in front of the camera,
/// projecting inside the sensor, and front-facing (view direction against
/// the outward normal).
fn visible(
    lm: &SimLandmark,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    width: u16,
    height: u16,
) -> Option<(f64, f64)> {
    let (u, v) = pose.project(&lm.position, k).ok()?;
    if u < 0.0 || u >= width as f64 || v < 0.0 || v >= height as f64 {
        return None;
    }
    let view = lm.position - pose.center();
    if view.dot(&lm.normal) >= 0.0 {
        return None;
    }
    Some((u, v))
}

/// Noisy (or exact, for `sigma_px = 0`) track observations of every visible
/// landmark in every window, with track id == landmark id.
pub fn gt_observations(scene: &SimScene, dt: f64, sigma_px: f64) -> Result<Vec<Observation>> {
    if dt <= 0.0 {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_add(0x0b5e_7a11));
    let noise = Normal::new(0.0, sigma_px.max(0.0)).expect("valid sigma");
    let mut observations = Vec::new();
    for k in 1..=scene.window_count(dt) {
        let pose = orbit_pose(k as f64 * dt, &scene.orbit)?;
        for (p, lm) in scene.landmarks.iter().enumerate() {
            if let Some((u, v)) = visible(lm, &pose, &scene.intrinsics, scene.width, scene.height)
            {
                let (du, dv) = if sigma_px > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                observations.push(Observation {
                    track: p,
                    window: k,
                    px: Vector2::new(u + du, v + dv),
                });
            }
        }
    }
    Ok(observations)
}

/// Event generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimEventConfig {
    pub events_per_landmark_per_second: f64,
    /// Gaussian pixel jitter applied to each emitted event.
    pub pixel_jitter: f64,
    /// Gaussian timestamp jitter in seconds.
    pub timestamp_jitter: f64,
    /// Uniform background noise rate over the whole sensor, events/s.
    pub background_noise_rate: f64,
    pub polarity_model: PolarityModel,
}

/// How polarities are assigned to landmark events.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolarityModel {
    /// Strict +/- alternation per landmark.
    #[default]
    Alternating,
}

impl Default for SimEventConfig {
    fn default() -> Self {
        SimEventConfig {
            events_per_landmark_per_second: 2000.0,
            pixel_jitter: 0.8,
            timestamp_jitter: 1e-4,
            background_noise_rate: 500.0,
            polarity_model: PolarityModel::Alternating,
        }
    }
}

impl SimEventConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.events_per_landmark_per_second >= 0.0
            && self.pixel_jitter >= 0.0
            && self.timestamp_jitter >= 0.0
            && self.background_noise_rate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("event rates and jitters must be >= 0".into()))
        }
    }
}

/// Synthesizes the raw event stream of a scene. Each landmark emits events
/// at the configured rate at its jittered projection while visible;
/// background noise is superimposed uniformly. Returns the stream and the
/// per-event ground-truth association (None for background noise).
pub fn gt_events(
    scene: &SimScene,
    cfg: &SimEventConfig,
) -> Result<(EventStream, Vec<Option<usize>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_add(0x5eed_e7e5));
    let px_noise = Normal::new(0.0, cfg.pixel_jitter.max(f64::MIN_POSITIVE)).expect("sigma");
    let t_noise = Normal::new(0.0, cfg.timestamp_jitter.max(f64::MIN_POSITIVE)).expect("sigma");

    let mut tagged: Vec<(Event, Option<usize>)> = Vec::new();
    if cfg.events_per_landmark_per_second > 0.0 {
        let step = 1.0 / cfg.events_per_landmark_per_second;
        for (p, lm) in scene.landmarks.iter().enumerate() {
            let mut polarity: i8 = 1;
            let mut j = 0u64;
            loop {
                let t = j as f64 * step;
                if t >= scene.duration {
                    break;
                }
                j += 1;
                let Ok(pose) = orbit_pose(t, &scene.orbit) else {
                    continue;
                };
                let Some((u, v)) =
                    visible(lm, &pose, &scene.intrinsics, scene.width, scene.height)
                else {
                    continue;
                };
                let (du, dv, dt_j) = if cfg.pixel_jitter > 0.0 || cfg.timestamp_jitter > 0.0 {
                    (
                        px_noise.sample(&mut rng),
                        px_noise.sample(&mut rng),
                        t_noise.sample(&mut rng),
                    )
                } else {
                    (0.0, 0.0, 0.0)
                };
                let x = (u + du).round();
                let y = (v + dv).round();
                if x < 0.0 || x >= scene.width as f64 || y < 0.0 || y >= scene.height as f64 {
                    continue;
                }
                let t_out = (t + dt_j).clamp(0.0, scene.duration);
                tagged.push((Event::new(t_out, x as u16, y as u16, polarity), Some(p)));
                polarity = -polarity;
            }
        }
    }
    let n_bg = (cfg.background_noise_rate * scene.duration).round() as usize;
    for _ in 0..n_bg {
        let t = rng.gen_range(0.0..scene.duration);
        let x = rng.gen_range(0..scene.width);
        let y = rng.gen_range(0..scene.height);
        let p = if rng.gen_bool(0.5) { 1 } else { -1 };
        tagged.push((Event::new(t, x, y, p), None));
    }

    tagged.sort_by(|a, b| a.0.t.partial_cmp(&b.0.t).unwrap());
    let associations: Vec<Option<usize>> = tagged.iter().map(|(_, a)| *a).collect();
    let events: Vec<Event> = tagged.into_iter().map(|(e, _)| e).collect();
    Ok((
        EventStream::new(events, scene.width, scene.height),
        associations,
    ))
}

/// Restricts an observation set to landmarks seen at least `min_obs` times
/// and re-indexes tracks to `0..n`. Returns the filtered observations and
/// the original landmark index per new track.
pub fn observed_subset(
    observations: &[Observation],
    n_landmarks: usize,
    min_obs: usize,
) -> (Vec<Observation>, Vec<usize>) {
    let mut counts = vec![0usize; n_landmarks];
    for o in observations {
        counts[o.track] += 1;
    }
    let kept: Vec<usize> = (0..n_landmarks).filter(|&p| counts[p] >= min_obs).collect();
    let index_of: std::collections::BTreeMap<usize, usize> =
        kept.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let filtered = observations
        .iter()
        .filter_map(|o| {
            index_of.get(&o.track).map(|&track| Observation {
                track,
                window: o.window,
                px: o.px,
            })
        })
        .collect();
    (filtered, kept)
}

/// Closed-form least-squares similarity alignment (scale, rotation,
/// translation) mapping `estimated` onto `gt` over the given index pairs.
#[derive(Debug, Clone)]
pub struct SimilarityAlign {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    /// RMS point distance after alignment, world units.
    pub rmse: f64,
}

impl SimilarityAlign {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

pub fn align_similarity(
    estimated: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    correspondence: &[(usize, usize)],
) -> Result<SimilarityAlign> {
    if correspondence.len() < 3 {
        return Err(Error::Precondition(format!(
            "similarity alignment needs at least 3 correspondences, got {}",
            correspondence.len()
        )));
    }
    let n = correspondence.len() as f64;
    let mut mu_x = Vector3::zeros();
    let mut mu_y = Vector3::zeros();
    for &(i, j) in correspondence {
        mu_x += estimated[i];
        mu_y += gt[j];
    }
    mu_x /= n;
    mu_y /= n;

    let mut sigma = Matrix3::zeros();
    let mut var_x = 0.0;
    for &(i, j) in correspondence {
        let x = estimated[i] - mu_x;
        let y = gt[j] - mu_y;
        sigma += y * x.transpose();
        var_x += x.norm_squared();
    }
    sigma /= n;
    var_x /= n;
    if var_x < 1e-24 {
        return Err(Error::DegenerateGeometry(
            "estimated points are coincident".into(),
        ));
    }
    let svd = sigma.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear; rotation is not unique".into(),
        ));
    }
    let rotation = nearest_rotation(&sigma);
    // trace(D S) with the same sign fix the projection used.
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let det = (u * vt).determinant();
    let trace_ds = sv[0] + sv[1] + sv[2] * det.signum();
    let scale = trace_ds / var_x;

    let translation = mu_y - scale * (rotation * mu_x);
    let mut ss = 0.0;
    for &(i, j) in correspondence {
        let mapped = scale * (rotation * estimated[i]) + translation;
        ss += (mapped - gt[j]).norm_squared();
    }
    let rmse = (ss / n).sqrt();
    Ok(SimilarityAlign {
        scale,
        rotation,
        translation,
        rmse,
    })
}

// --- scene spec file -------------------------------------------------------

/// Serializable orbit parameters (R0 as a wxyz quaternion).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OrbitParamsJson {
    pub r: f64,
    pub f: f64,
    /// Unit quaternion `[w, x, y, z]`.
    pub r0_quat: [f64; 4],
    pub n: [f64; 3],
    pub u: [f64; 3],
    pub c: [f64; 3],
}

impl From<&OrbitParams> for OrbitParamsJson {
    fn from(o: &OrbitParams) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&o.r0);
        OrbitParamsJson {
            r: o.r,
            f: o.f,
            r0_quat: [q.w, q.i, q.j, q.k],
            n: [o.n.x, o.n.y, o.n.z],
            u: [o.u.x, o.u.y, o.u.z],
            c: [o.c.x, o.c.y, o.c.z],
        }
    }
}

impl OrbitParamsJson {
    pub fn to_orbit(&self) -> Result<OrbitParams> {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            self.r0_quat[0],
            self.r0_quat[1],
            self.r0_quat[2],
            self.r0_quat[3],
        ));
        OrbitParams::new(
            self.r,
            self.f,
            q.to_rotation_matrix(),
            Unit::new_normalize(Vector3::from(self.n)),
            Vector3::from(self.u),
            Vector3::from(self.c),
        )
    }
}

/// On-disk scene description consumed by the simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub preset: ObjectPreset,
    pub orbit: OrbitParamsJson,
    pub duration: f64,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub sensor_width: u16,
    pub sensor_height: u16,
    #[serde(default)]
    pub events: SimEventConfig,
}

impl SceneSpec {
    pub fn build(&self) -> Result<SimScene> {
        Ok(make_scene(
            &self.preset,
            self.orbit.to_orbit()?,
            self.duration,
            self.seed,
            self.intrinsics,
            self.sensor_width,
            self.sensor_height,
        ))
    }
}

/// Ground-truth sidecar written next to a simulated event file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtSidecar {
    pub scene: SceneSpec,
    pub landmarks: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Per-event landmark association for the emitted stream; None (JSON
    /// null) marks background noise.
    pub associations: Vec<Option<usize>>,
}

pub fn load_scene_spec<P: AsRef<Path>>(path: P) -> Result<SceneSpec> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn load_gt_sidecar<P: AsRef<Path>>(path: P) -> Result<GtSidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn save_gt_sidecar<P: AsRef<Path>>(sidecar: &GtSidecar, path: P) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}
