//! Circular-orbit camera motion model.
//!
//! A camera on a circular orbit of radius `r` about axis `n` through center
//! `c`, spinning at `f` Hz, has its center at
//!
//! ```text
//! t(tau) = r cos(2 pi f tau) u + r sin(2 pi f tau) v + c,    v = n x u
//! ```
//!
//! Its orientation is composed from three rotations: a base transform into
//! the orbit frame (axis alignment plus the in-plane rotation that follows
//! the orbit), a look-at rotation pointing the optical axis at `c`, and a
//! constant offset `R0`. Together with the landmark cloud this gives a
//! 14-parameter motion model (r, f, R0, n, u, c) regardless of how many
//! views are observed.

use nalgebra::{Rotation3, Unit, Vector2, Vector3};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::geometry::{look_at, rotation_to};

/// The 14-parameter orbital motion model (1 + 1 + 3 + 3 + 3 + 3 as stored).
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitParams {
    /// Orbit radius, world units.
    pub r: f64,
    /// Rotation rate, Hz.
    pub f: f64,
    /// Constant rotation applied after the look-at (camera mounting offset).
    pub r0: Rotation3<f64>,
    /// Unit orbit-plane normal along the spin axis.
    pub n: Unit<Vector3<f64>>,
    /// Unit in-plane phase vector; camera center at tau = 0 is `c + r u`.
    pub u: Unit<Vector3<f64>>,
    /// Circle center, world units.
    pub c: Vector3<f64>,
}

impl OrbitParams {
    /// Builds params, re-orthogonalizing `u` against `n`.
    pub fn new(
        r: f64,
        f: f64,
        r0: Rotation3<f64>,
        n: Unit<Vector3<f64>>,
        u: Vector3<f64>,
        c: Vector3<f64>,
    ) -> Result<Self> {
        if !r.is_finite() || r <= 0.0 || !f.is_finite() || f <= 0.0 {
            return Err(Error::Validation(format!(
                "orbit radius and rate must be positive (r = {r}, f = {f})"
            )));
        }
        let u_perp = u - n.dot(&u) * n.into_inner();
        if u_perp.norm() < 1e-12 {
            return Err(Error::DegenerateGeometry(
                "phase vector parallel to the orbit axis".into(),
            ));
        }
        Ok(OrbitParams {
            r,
            f,
            r0,
            n,
            u: Unit::new_normalize(u_perp),
            c,
        })
    }

    /// Second in-plane direction `v = n x u`.
    pub fn v(&self) -> Vector3<f64> {
        self.n.cross(&self.u)
    }

    /// `|n.u|`, which the solver keeps at ~0.
    pub fn orthogonality_error(&self) -> f64 {
        self.n.dot(&self.u).abs()
    }
}

/// Camera center on the orbit at time `tau`.
pub fn orbit_center(tau: f64, orbit: &OrbitParams) -> Vector3<f64> {
    let angle = std::f64::consts::TAU * orbit.f * tau;
    orbit.r * angle.cos() * orbit.u.into_inner() + orbit.r * angle.sin() * orbit.v() + orbit.c
}

/// World-to-camera pose at time `t`. The camera sits at
/// [`orbit_center`]`(t)`; with `r0` identity its optical axis passes through
/// the circle center `c`.
pub fn orbit_pose(t: f64, orbit: &OrbitParams) -> Result<CameraPose> {
    let center = orbit_center(t, orbit);
    let angle = std::f64::consts::TAU * orbit.f * t;
    // Base: align the axis with z, then counter-rotate in-plane so the
    // camera-to-center direction stays fixed in the orbit frame.
    let align = rotation_to(&orbit.n, &Unit::new_unchecked(Vector3::z()));
    let base = Rotation3::from_axis_angle(&Unit::new_unchecked(Vector3::z()), -angle) * align;

    let to_center = base * (orbit.c - center);
    let dist = to_center.norm();
    if dist < 1e-12 * orbit.c.norm().max(1.0) {
        return Err(Error::DegenerateGeometry(
            "camera center coincides with the orbit center (r = 0)".into(),
        ));
    }
    let d = Unit::new_unchecked(to_center / dist);
    let look = look_at(&d)?;

    let rotation = orbit.r0 * look * base;
    let translation = -(rotation * center);
    Ok(CameraPose::new(rotation, translation))
}

/// Projects a world point through the orbit camera at time `t`.
pub fn reproject(
    x_world: &Vector3<f64>,
    t: f64,
    orbit: &OrbitParams,
    k: &CameraIntrinsics,
) -> Result<(f64, f64)> {
    orbit_pose(t, orbit)?.project(x_world, k)
}

/// Sparse landmark cloud, indexed by track.
pub type Landmarks = Vec<Vector3<f64>>;

/// A measured track position in one temporal window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Track (and landmark) index.
    pub track: usize,
    /// Window index; the observation time is `window * dt`.
    pub window: usize,
    /// Measured pixel position.
    pub px: Vector2<f64>,
}

/// Raw reprojection residuals `predicted - measured`, one per observation.
/// Observations whose prediction falls behind the camera get a residual of
/// magnitude `cap` and are flagged.
pub fn residuals(
    orbit: &OrbitParams,
    landmarks: &Landmarks,
    observations: &[Observation],
    k: &CameraIntrinsics,
    dt: f64,
    cap: f64,
) -> (Vec<Vector2<f64>>, Vec<bool>) {
    let mut poses: std::collections::BTreeMap<usize, Option<CameraPose>> = Default::default();
    let mut res = Vec::with_capacity(observations.len());
    let mut flags = vec![false; observations.len()];
    for (i, obs) in observations.iter().enumerate() {
        let pose = poses
            .entry(obs.window)
            .or_insert_with(|| orbit_pose(obs.window as f64 * dt, orbit).ok());
        let predicted = pose
            .as_ref()
            .and_then(|p| p.project(&landmarks[obs.track], k).ok());
        match predicted {
            Some((u, v)) => res.push(Vector2::new(u, v) - obs.px),
            None => {
                flags[i] = true;
                res.push(Vector2::new(cap, 0.0));
            }
        }
    }
    (res, flags)
}

/// Root-mean-square of residual components: `sqrt(sum(ru^2 + rv^2) / 2N)`.
pub fn rms_px(residuals: &[Vector2<f64>]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let ss: f64 = residuals.iter().map(|r| r.norm_squared()).sum();
    (ss / (2.0 * residuals.len() as f64)).sqrt()
}

/// Image-plane projection of the spin axis through the circle center, seen
/// by the camera at `t = 0`, extended to the image borders. Returns the two
/// border intersection points (or the raw projections of `c` and `c + n`
/// when the line misses the image rectangle).
pub fn screw_line(
    orbit: &OrbitParams,
    k: &CameraIntrinsics,
    width: u16,
    height: u16,
) -> Result<((f64, f64), (f64, f64))> {
    let pose = orbit_pose(0.0, orbit)?;
    let a = pose.project(&orbit.c, k);
    let b = pose.project(&(orbit.c + orbit.n.into_inner()), k);
    let c_flip = pose.project(&(orbit.c - orbit.n.into_inner()), k);
    let (p0, p1) = match (a, b, c_flip) {
        (Ok(a), Ok(b), _) => (a, b),
        (Ok(a), Err(_), Ok(c)) => (a, c),
        _ => return Err(Error::BehindCamera),
    };
    if ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt() < 1e-12 {
        return Err(Error::DegenerateGeometry(
            "axis projects to a single image point".into(),
        ));
    }
    Ok(clip_line_to_image(p0, p1, width as f64, height as f64).unwrap_or((p0, p1)))
}

/// Intersects the infinite line through `p0`, `p1` with the image rectangle
/// `[0, w] x [0, h]`; returns the two extreme intersection points.
fn clip_line_to_image(
    p0: (f64, f64),
    p1: (f64, f64),
    w: f64,
    h: f64,
) -> Option<((f64, f64), (f64, f64))> {
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let mut hits: Vec<(f64, (f64, f64))> = Vec::new();
    let mut push = |s: f64, pt: (f64, f64)| {
        if pt.0 >= -1e-9 && pt.0 <= w + 1e-9 && pt.1 >= -1e-9 && pt.1 <= h + 1e-9 {
            hits.push((s, pt));
        }
    };
    if d.0.abs() > 1e-12 {
        for x in [0.0, w] {
            let s = (x - p0.0) / d.0;
            push(s, (x, p0.1 + s * d.1));
        }
    }
    if d.1.abs() > 1e-12 {
        for y in [0.0, h] {
            let s = (y - p0.1) / d.1;
            push(s, (p0.0 + s * d.0, y));
        }
    }
    if hits.len() < 2 {
        return None;
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let first = hits.first().unwrap().1;
    let last = hits.last().unwrap().1;
    Some((first, last))
}

/// An orbit solution: motion parameters, landmark cloud, intrinsics, and the
/// solve summary. Per-window poses are always derived from the orbit via
/// [`orbit_pose`]; there is no independent pose state.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub orbit: OrbitParams,
    pub landmarks: Landmarks,
    pub intrinsics: CameraIntrinsics,
    /// Window duration backing the `window -> time` mapping.
    pub dt: f64,
    /// RMS of reprojection residual components in pixels.
    pub rms_reprojection: f64,
    pub converged: bool,
    /// Accepted-step costs of the refinement that produced this solution
    /// (empty for unrefined initializations).
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl Reconstruction {
    /// A reconstruction as it comes out of initialization, before refinement.
    pub fn initial(
        orbit: OrbitParams,
        landmarks: Landmarks,
        intrinsics: CameraIntrinsics,
        dt: f64,
    ) -> Self {
        Reconstruction {
            orbit,
            landmarks,
            intrinsics,
            dt,
            rms_reprojection: f64::NAN,
            converged: false,
            cost_history: Vec::new(),
            iterations: 0,
        }
    }

    /// Derived pose for window `k`.
    pub fn window_pose(&self, k: usize) -> Result<CameraPose> {
        orbit_pose(k as f64 * self.dt, &self.orbit)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// A mildly tilted, offset orbit used by tests across the crate.
    pub fn sample_orbit() -> OrbitParams {
        OrbitParams::new(
            1.0,
            1.5,
            Rotation3::from_euler_angles(0.02, -0.03, 0.01),
            Unit::new_normalize(Vector3::new(0.1, -0.05, 1.0)),
            Vector3::x(),
            Vector3::new(0.2, -0.1, 0.3),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn simple_orbit() -> OrbitParams {
        OrbitParams::new(
            1.0,
            1.0,
            Rotation3::identity(),
            Unit::new_normalize(Vector3::z()),
            Vector3::x(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    pub fn random_orbit(rng: &mut ChaCha8Rng) -> OrbitParams {
        let n = Unit::new_normalize(Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        ));
        let u_seed = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let r0 = Rotation3::from_euler_angles(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        OrbitParams::new(
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..3.0),
            r0,
            n,
            u_seed,
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        )
        .unwrap_or_else(|_| simple_orbit())
    }

    #[test]
    fn center_at_phase_zero() {
        let orbit = simple_orbit();
        assert!((orbit_center(0.0, &orbit) - Vector3::x()).norm() < 1e-15);
    }

    #[test]
    fn center_at_quarter_period() {
        let orbit = simple_orbit();
        let quarter = 1.0 / (4.0 * orbit.f);
        assert!((orbit_center(quarter, &orbit) - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn center_is_periodic() {
        let orbit = simple_orbit();
        let a = orbit_center(0.0, &orbit);
        let b = orbit_center(1.0 / orbit.f, &orbit);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn pose_center_matches_orbit_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let orbit = random_orbit(&mut rng);
            let t = rng.gen_range(0.0..3.0);
            let pose = orbit_pose(t, &orbit).unwrap();
            let expected = orbit_center(t, &orbit);
            assert!(
                (pose.center() - expected).norm() < 1e-10,
                "pose center must equal the orbit center"
            );
        }
    }

    #[test]
    fn look_at_puts_circle_center_on_optical_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut orbit = random_orbit(&mut rng);
            orbit.r0 = Rotation3::identity();
            let t = rng.gen_range(0.0..3.0);
            let pose = orbit_pose(t, &orbit).unwrap();
            let pc = pose.to_camera(&orbit.c);
            assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9, "center off axis: {pc}");
            assert!(pc.z > 0.0);
        }
    }

    #[test]
    fn pose_periodicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let orbit = random_orbit(&mut rng);
            let t = rng.gen_range(0.0..2.0);
            let a = orbit_pose(t, &orbit).unwrap();
            let b = orbit_pose(t + 1.0 / orbit.f, &orbit).unwrap();
            assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn look_at_degenerate_direction() {
        // n = z, u = (0, -1, 0): the camera-to-center direction in the orbit
        // frame is exactly the look-at hint.
        let orbit = OrbitParams::new(
            1.0,
            1.0,
            Rotation3::identity(),
            Unit::new_normalize(Vector3::z()),
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::zeros(),
        )
        .unwrap();
        assert!(matches!(
            orbit_pose(0.0, &orbit),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn residual_sign_convention() {
        let orbit = simple_orbit();
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0);
        let landmarks = vec![Vector3::new(0.0, 0.0, 0.1)];
        let (u, v) = reproject(&landmarks[0], 0.030, &orbit, &k).unwrap();
        let obs = vec![Observation {
            track: 0,
            window: 1,
            px: Vector2::new(u + 1.0, v - 2.0),
        }];
        let (res, flags) = residuals(&orbit, &landmarks, &obs, &k, 0.030, 1e3);
        assert!(!flags[0]);
        assert!((res[0] - Vector2::new(-1.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn residuals_zero_on_self_consistent_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let orbit = random_orbit(&mut rng);
        let k = CameraIntrinsics::new(250.0, 250.0, 173.0, 130.0);
        let landmarks: Landmarks = (0..10)
            .map(|_| {
                orbit.c
                    + Vector3::new(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                    )
            })
            .collect();
        let mut obs = Vec::new();
        for w in 1..20 {
            for (p, lm) in landmarks.iter().enumerate() {
                if let Ok((u, v)) = reproject(lm, w as f64 * 0.030, &orbit, &k) {
                    obs.push(Observation {
                        track: p,
                        window: w,
                        px: Vector2::new(u, v),
                    });
                }
            }
        }
        assert!(!obs.is_empty());
        let (res, flags) = residuals(&orbit, &landmarks, &obs, &k, 0.030, 1e3);
        assert!(flags.iter().all(|f| !f));
        assert!(rms_px(&res) < 1e-12);
    }

    #[test]
    fn behind_camera_residual_is_capped_and_flagged() {
        let orbit = simple_orbit();
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0);
        // A landmark far outside the orbit, behind the camera when it looks
        // at the center.
        let landmarks = vec![Vector3::new(5.0, 0.0, 0.0)];
        let obs = vec![Observation {
            track: 0,
            window: 0,
            px: Vector2::new(0.0, 0.0),
        }];
        let (res, flags) = residuals(&orbit, &landmarks, &obs, &k, 0.030, 1e3);
        assert!(flags[0]);
        assert!((res[0].norm() - 1e3).abs() < 1e-9);
    }

    #[test]
    fn gauge_invariance_under_scene_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let orbit = random_orbit(&mut rng);
        let k = CameraIntrinsics::new(250.0, 250.0, 173.0, 130.0);
        let landmarks: Landmarks = (0..8)
            .map(|_| {
                orbit.c
                    + Vector3::new(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                    )
            })
            .collect();
        let mut obs = Vec::new();
        for w in 1..30 {
            for (p, lm) in landmarks.iter().enumerate() {
                if let Ok((u, v)) = reproject(lm, w as f64 * 0.030, &orbit, &k) {
                    obs.push(Observation {
                        track: p,
                        window: w,
                        px: Vector2::new(u + rng.gen_range(-1.0..1.0), v),
                    });
                }
            }
        }
        let (base, _) = residuals(&orbit, &landmarks, &obs, &k, 0.030, 1e3);
        for s in [0.1, 10.0] {
            let scaled_orbit = OrbitParams {
                r: orbit.r * s,
                c: orbit.c * s,
                ..orbit.clone()
            };
            let scaled_landmarks: Landmarks =
                landmarks.iter().map(|x| x * s).collect();
            let (scaled, _) = residuals(&scaled_orbit, &scaled_landmarks, &obs, &k, 0.030, 1e3);
            for (a, b) in base.iter().zip(&scaled) {
                assert!((a - b).norm() < 1e-9, "scaling by {s} changed residuals");
            }
        }
    }

    #[test]
    fn screw_line_vertical_for_side_on_camera() {
        // Camera on the x-axis looking at the origin, axis n = z: the spin
        // axis projects to a vertical image line through the principal point.
        let orbit = simple_orbit();
        let k = CameraIntrinsics::new(100.0, 100.0, 173.0, 130.0);
        let ((x0, _y0), (x1, _y1)) = screw_line(&orbit, &k, 346, 260).unwrap();
        assert!((x0 - 173.0).abs() < 1e-9);
        assert!((x1 - 173.0).abs() < 1e-9);
    }

    #[test]
    fn screw_line_behind_camera() {
        // R0 turns the camera away from the center, so the whole axis is
        // behind it.
        let mut orbit = simple_orbit();
        orbit.r0 = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::y()), std::f64::consts::PI);
        assert!(matches!(
            screw_line(&orbit, &CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0), 346, 260),
            Err(Error::BehindCamera)
        ));
    }
}
