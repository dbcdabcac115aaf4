//! Joint refinement of orbit parameters and landmarks.
//!
//! Levenberg-Marquardt over {f, R0, n, u, c, landmarks} with the radius held
//! fixed (it is the monocular scale gauge). Residuals are Huber-robustified
//! reprojection errors; Jacobians come from central finite differences.
//!
//! The axis and phase vector are optimized through minimal local charts (two
//! tangent offsets for n, one in-plane angle for u, a 3-vector axis-angle
//! increment for R0) that are folded into the base point after every
//! accepted step. Folding is what keeps `|n| = |u| = 1` and `n.u = 0` exact
//! across the run while the cost stays a smooth function of the chart
//! coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x3, Rotation3, Unit, Vector2, Vector3};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::orbit::{orbit_pose, rms_px, Landmarks, Observation, OrbitParams, Reconstruction};

/// Solver settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizeOpts {
    /// Window duration (seconds); observation `k` is at time `k * dt`.
    pub dt: f64,
    /// Huber threshold in pixels.
    pub huber_delta: f64,
    /// Residual magnitude assigned to behind-camera predictions.
    pub residual_cap: f64,
    pub max_iters: usize,
    /// Initial LM damping; x10 on reject, x0.5 on accept.
    pub lambda_init: f64,
    /// Stop when an accepted step decreases the cost by less than this
    /// relative amount.
    pub rel_cost_tol: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Re-anchor the solution's world frame to the initialization after the
    /// solve. The reprojection model is invariant under a rigid motion of
    /// the world applied to (n, u, c, R0, landmarks), so large early steps
    /// can drift the solution through that null space; anchoring tilts the
    /// refined orbit plane and center back onto the init's without changing
    /// any residual.
    pub anchor_gauge: bool,
}

impl Default for OptimizeOpts {
    fn default() -> Self {
        OptimizeOpts {
            dt: 0.030,
            huber_delta: 2.0,
            residual_cap: 1e3,
            max_iters: 200,
            lambda_init: 1e-4,
            rel_cost_tol: 1e-10,
            grad_tol: 1e-10,
            anchor_gauge: true,
        }
    }
}

const N_GLOBAL: usize = 10; // f, dR0 (3), dn (2), du (1), c (3)

/// The solve state the chart coordinates are relative to.
#[derive(Clone)]
struct Chart {
    r: f64,
    f: f64,
    r0: Rotation3<f64>,
    n: Unit<Vector3<f64>>,
    u: Unit<Vector3<f64>>,
    c: Vector3<f64>,
    // Tangent basis at n.
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    landmarks: Landmarks,
}

impl Chart {
    fn new(orbit: &OrbitParams, landmarks: Landmarks) -> Self {
        let e1 = crate::geometry::any_perpendicular(&orbit.n).into_inner();
        let e2 = orbit.n.cross(&e1);
        Chart {
            r: orbit.r,
            f: orbit.f,
            r0: orbit.r0,
            n: orbit.n,
            u: orbit.u,
            c: orbit.c,
            e1,
            e2,
            landmarks,
        }
    }

    fn dim(&self) -> usize {
        N_GLOBAL + 3 * self.landmarks.len()
    }

    /// Chart coordinates of the base point itself.
    fn base_params(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        x[0] = self.f;
        x[7] = self.c.x;
        x[8] = self.c.y;
        x[9] = self.c.z;
        for (p, lm) in self.landmarks.iter().enumerate() {
            x[N_GLOBAL + 3 * p] = lm.x;
            x[N_GLOBAL + 3 * p + 1] = lm.y;
            x[N_GLOBAL + 3 * p + 2] = lm.z;
        }
        x
    }

    /// Maps chart coordinates to a valid parameter point. Smooth wherever
    /// the perturbed axis stays nonzero.
    fn orbit_at(&self, x: &[f64]) -> OrbitParams {
        let n_raw = self.n.into_inner() + x[4] * self.e1 + x[5] * self.e2;
        let n = Unit::new_normalize(n_raw);
        let u_perp = self.u.into_inner() - n.dot(&self.u) * n.into_inner();
        let u0 = u_perp.normalize();
        let (s, c) = x[6].sin_cos();
        let u = c * u0 + s * n.cross(&u0);
        let r0 = Rotation3::from_scaled_axis(Vector3::new(x[1], x[2], x[3])) * self.r0;
        OrbitParams {
            r: self.r,
            f: x[0],
            r0,
            n,
            u: Unit::new_unchecked(u),
            c: Vector3::new(x[7], x[8], x[9]),
        }
    }

    fn landmark_at(&self, x: &[f64], p: usize) -> Vector3<f64> {
        Vector3::new(
            x[N_GLOBAL + 3 * p],
            x[N_GLOBAL + 3 * p + 1],
            x[N_GLOBAL + 3 * p + 2],
        )
    }
}

/// Huber-robustified residual: `w(|r|) r` with `sum |w r|^2 = sum rho(|r|)`.
fn robustify(r: Vector2<f64>, delta: f64) -> Vector2<f64> {
    let s = r.norm();
    if s <= delta {
        r / std::f64::consts::SQRT_2
    } else {
        let w = (delta * (s - 0.5 * delta)).sqrt() / s;
        w * r
    }
}

/// Reprojection cost frozen at an initial reconstruction; exposes the exact
/// cost, residual and gradient the solver uses so its differentials can be
/// verified externally.
pub struct CostModel {
    chart: Chart,
    observations: Vec<Observation>,
    windows: Vec<usize>,
    intrinsics: CameraIntrinsics,
    opts: OptimizeOpts,
}

impl CostModel {
    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn base_params(&self) -> Vec<f64> {
        self.chart.base_params()
    }

    fn poses_at(&self, orbit: &OrbitParams) -> std::collections::BTreeMap<usize, Option<CameraPose>> {
        self.windows
            .iter()
            .map(|&k| (k, orbit_pose(k as f64 * self.opts.dt, orbit).ok()))
            .collect()
    }

    fn residual_obs(
        &self,
        pose: &Option<CameraPose>,
        lm: &Vector3<f64>,
        obs: &Observation,
    ) -> Vector2<f64> {
        let predicted = pose
            .as_ref()
            .and_then(|p| p.project(lm, &self.intrinsics).ok());
        let raw = match predicted {
            Some((u, v)) => Vector2::new(u, v) - obs.px,
            None => Vector2::new(self.opts.residual_cap, 0.0),
        };
        robustify(raw, self.opts.huber_delta)
    }

    /// Robustified residual vector at chart coordinates `x` (2 rows per
    /// observation).
    pub fn residuals(&self, x: &[f64]) -> DVector<f64> {
        let orbit = self.chart.orbit_at(x);
        let poses = self.poses_at(&orbit);
        let mut r = DVector::zeros(2 * self.observations.len());
        for (i, obs) in self.observations.iter().enumerate() {
            let lm = self.chart.landmark_at(x, obs.track);
            let ri = self.residual_obs(&poses[&obs.window], &lm, obs);
            r[2 * i] = ri.x;
            r[2 * i + 1] = ri.y;
        }
        r
    }

    pub fn cost(&self, x: &[f64]) -> f64 {
        self.residuals(x).norm_squared()
    }

    /// Raw (unrobustified) residuals at the base point, for reporting.
    pub fn raw_residuals_at_base(&self) -> Vec<Vector2<f64>> {
        let x = self.base_params();
        let orbit = self.chart.orbit_at(&x);
        let poses = self.poses_at(&orbit);
        self.observations
            .iter()
            .map(|obs| {
                let lm = self.chart.landmark_at(&x, obs.track);
                match poses[&obs.window]
                    .as_ref()
                    .and_then(|p| p.project(&lm, &self.intrinsics).ok())
                {
                    Some((u, v)) => Vector2::new(u, v) - obs.px,
                    None => Vector2::new(self.opts.residual_cap, 0.0),
                }
            })
            .collect()
    }

    fn step_size(x_j: f64) -> f64 {
        1e-6 * x_j.abs().max(1.0)
    }

    /// Central-difference Jacobian of the robustified residuals, split into
    /// per-observation global and landmark blocks.
    fn jacobian(&self, x: &[f64], center: &DVector<f64>) -> JacobianBlocks {
        let m = self.observations.len();
        let mut globals = DMatrix::zeros(2 * m, N_GLOBAL);
        let mut lms: Vec<Matrix2x3<f64>> = vec![Matrix2x3::zeros(); m];

        let mut xp = x.to_vec();
        for j in 0..N_GLOBAL {
            let h = Self::step_size(x[j]);
            xp[j] = x[j] + h;
            let rp = self.residuals(&xp);
            xp[j] = x[j] - h;
            let rm = self.residuals(&xp);
            xp[j] = x[j];
            for row in 0..2 * m {
                globals[(row, j)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }

        // Landmark columns only affect their own observations; poses are
        // unchanged, so they are cached once at the center point.
        let orbit = self.chart.orbit_at(x);
        let poses = self.poses_at(&orbit);
        let mut by_track: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, obs) in self.observations.iter().enumerate() {
            by_track.entry(obs.track).or_default().push(i);
        }
        for (&track, obs_ids) in &by_track {
            let lm = self.chart.landmark_at(x, track);
            for coord in 0..3 {
                let h = Self::step_size(lm[coord]);
                let mut lp = lm;
                lp[coord] += h;
                let mut lmn = lm;
                lmn[coord] -= h;
                for &i in obs_ids {
                    let obs = &self.observations[i];
                    let rp = self.residual_obs(&poses[&obs.window], &lp, obs);
                    let rm = self.residual_obs(&poses[&obs.window], &lmn, obs);
                    lms[i][(0, coord)] = (rp.x - rm.x) / (2.0 * h);
                    lms[i][(1, coord)] = (rp.y - rm.y) / (2.0 * h);
                }
            }
        }
        let _ = center;
        JacobianBlocks { globals, lms }
    }

    /// Cost gradient `2 J^T r` at the base point.
    pub fn gradient_at_base(&self) -> Vec<f64> {
        let x = self.base_params();
        let r = self.residuals(&x);
        let jac = self.jacobian(&x, &r);
        let (_, g) = normal_equations(self, &jac, &r);
        g.iter().map(|v| 2.0 * v).collect()
    }
}

struct JacobianBlocks {
    globals: DMatrix<f64>,
    lms: Vec<Matrix2x3<f64>>,
}

/// Accumulates `J^T J` and `J^T r` exploiting the block sparsity of the
/// landmark columns.
fn normal_equations(
    model: &CostModel,
    jac: &JacobianBlocks,
    r: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let dim = model.dim();
    let mut a = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for (i, obs) in model.observations.iter().enumerate() {
        let base = N_GLOBAL + 3 * obs.track;
        let gi = jac.globals.rows(2 * i, 2);
        let li = &jac.lms[i];
        let ri = Vector2::new(r[2 * i], r[2 * i + 1]);
        for a_idx in 0..N_GLOBAL {
            let ga = Vector2::new(gi[(0, a_idx)], gi[(1, a_idx)]);
            g[a_idx] += ga.dot(&ri);
            for b_idx in a_idx..N_GLOBAL {
                let gb = Vector2::new(gi[(0, b_idx)], gi[(1, b_idx)]);
                a[(a_idx, b_idx)] += ga.dot(&gb);
            }
            for b in 0..3 {
                let lb = Vector2::new(li[(0, b)], li[(1, b)]);
                a[(a_idx, base + b)] += ga.dot(&lb);
            }
        }
        for a_idx in 0..3 {
            let la = Vector2::new(li[(0, a_idx)], li[(1, a_idx)]);
            g[base + a_idx] += la.dot(&ri);
            for b_idx in a_idx..3 {
                let lb = Vector2::new(li[(0, b_idx)], li[(1, b_idx)]);
                a[(base + a_idx, base + b_idx)] += la.dot(&lb);
            }
        }
    }
    // Mirror the upper triangle.
    for i in 0..dim {
        for j in (i + 1)..dim {
            a[(j, i)] = a[(i, j)];
        }
    }
    (a, g)
}

/// Builds the cost model the optimizer minimizes, frozen at `init`.
pub fn cost_model(
    init: &Reconstruction,
    observations: &[Observation],
    opts: &OptimizeOpts,
) -> Result<CostModel> {
    if init.landmarks.is_empty() || observations.is_empty() {
        return Err(Error::Precondition(
            "optimization needs landmarks and observations".into(),
        ));
    }
    let mut per_track = vec![0usize; init.landmarks.len()];
    for obs in observations {
        if obs.track >= init.landmarks.len() {
            return Err(Error::Precondition(format!(
                "observation references landmark {} of {}",
                obs.track,
                init.landmarks.len()
            )));
        }
        per_track[obs.track] += 1;
    }
    if let Some(p) = per_track.iter().position(|&c| c < 2) {
        return Err(Error::Precondition(format!(
            "landmark {p} has {} observation(s), need at least 2",
            per_track[p]
        )));
    }
    let windows: std::collections::BTreeSet<usize> =
        observations.iter().map(|o| o.window).collect();
    Ok(CostModel {
        chart: Chart::new(&init.orbit, init.landmarks.clone()),
        observations: observations.to_vec(),
        windows: windows.into_iter().collect(),
        intrinsics: init.intrinsics,
        opts: opts.clone(),
    })
}

/// Levenberg-Marquardt refinement of `init` against the observations.
/// Returns the refined reconstruction; `converged` is false when the
/// iteration budget ran out first. The cost over accepted steps is strictly
/// non-increasing.
///
/// A solve that stalls with a large residual is the signature of a
/// frequency alias (the cost is strongly multi-modal in `f` when the phase
/// error accumulated over the stream approaches a revolution). In that case
/// the solve is deterministically restarted from `f` rescaled by
/// [`F_RESTART_FACTORS`] and the lowest-cost result wins.
pub fn optimize(
    init: &Reconstruction,
    observations: &[Observation],
    opts: &OptimizeOpts,
) -> Result<Reconstruction> {
    let primary = optimize_single(init, observations, opts)?;
    if primary.rms_reprojection <= 3.0 * opts.huber_delta {
        return Ok(primary);
    }
    let final_cost = |rec: &Reconstruction| rec.cost_history.last().copied().unwrap_or(f64::MAX);
    let mut best = primary;
    for factor in F_RESTART_FACTORS {
        let mut restart = init.clone();
        restart.orbit.f = init.orbit.f * factor;
        // The initial landmarks were triangulated under the old frequency;
        // rebuild them for the rescaled one so the restart does not inherit
        // phase-corrupted structure.
        if let Ok((landmarks, kept, _)) =
            triangulate_landmarks(observations, &restart.orbit, &init.intrinsics, opts.dt)
        {
            if kept.len() == restart.landmarks.len()
                && kept.iter().enumerate().all(|(i, &orig)| i == orig)
            {
                restart.landmarks = landmarks;
            }
        }
        if let Ok(out) = optimize_single(&restart, observations, opts) {
            if final_cost(&out) < final_cost(&best) {
                best = out;
            }
        }
    }
    Ok(best)
}

/// Frequency rescale factors tried when the primary solve stalls.
pub const F_RESTART_FACTORS: [f64; 2] = [0.95, 1.05];

/// Rigidly moves the world frame of a solution so that its orbit axis and
/// center coincide with the reference ones: `x -> Q (x - c) + c_ref` with
/// `Q` the minimal rotation taking `n` onto `n_ref`. This is a motion along
/// the model's gauge null space, so every residual is preserved.
fn anchor_gauge(
    orbit: &OrbitParams,
    landmarks: &Landmarks,
    n_ref: &Unit<Vector3<f64>>,
    c_ref: &Vector3<f64>,
    t_ref: f64,
) -> Option<(OrbitParams, Landmarks)> {
    let q = crate::geometry::rotation_to(&orbit.n, n_ref);
    let old_pose = orbit_pose(t_ref, orbit).ok()?;

    let mut anchored = OrbitParams {
        r: orbit.r,
        f: orbit.f,
        r0: orbit.r0,
        n: *n_ref,
        u: Unit::new_normalize(q * orbit.u.into_inner()),
        c: *c_ref,
    };
    // R0 such that the anchored pose at t_ref equals the old pose composed
    // with the inverse world motion.
    let base = OrbitParams {
        r0: Rotation3::identity(),
        ..anchored.clone()
    };
    let m = orbit_pose(t_ref, &base).ok()?;
    let target = old_pose.rotation * q.inverse();
    anchored.r0 = crate::geometry::nearest_rotation(
        &(target.matrix() * m.rotation.matrix().transpose()),
    );
    let moved: Landmarks = landmarks.iter().map(|x| q * (x - orbit.c) + c_ref).collect();
    Some((anchored, moved))
}

fn optimize_single(
    init: &Reconstruction,
    observations: &[Observation],
    opts: &OptimizeOpts,
) -> Result<Reconstruction> {
    let mut model = cost_model(init, observations, opts)?;
    let mut x = model.base_params();
    let mut r = model.residuals(&x);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(Error::InvalidInitialization(format!(
            "initial cost is not finite ({cost})"
        )));
    }

    let mut cost_history = vec![cost];
    let mut lambda = opts.lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let jac = model.jacobian(&x, &r);
        let (a, g) = normal_equations(&model, &jac, &r);

        let grad_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if 2.0 * grad_inf < opts.grad_tol {
            converged = true;
            iterations -= 1;
            break;
        }

        let d_max = (0..model.dim()).fold(0.0f64, |m, i| m.max(a[(i, i)]));
        let mut accepted = false;
        loop {
            let mut damped = a.clone();
            for i in 0..model.dim() {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12 * d_max.max(1.0));
            }
            let step = Cholesky::new(damped).map(|ch| ch.solve(&(-&g)));
            if let Some(step) = step {
                let mut x_new = x.clone();
                for i in 0..model.dim() {
                    x_new[i] += step[i];
                }
                let r_new = model.residuals(&x_new);
                let cost_new = r_new.norm_squared();
                if cost_new.is_finite() && cost_new < cost {
                    // Fold the accepted point into a fresh chart so the unit
                    // and orthogonality constraints are restored exactly.
                    let orbit = model.chart.orbit_at(&x_new);
                    let landmarks: Landmarks = (0..model.chart.landmarks.len())
                        .map(|p| model.chart.landmark_at(&x_new, p))
                        .collect();
                    model.chart = Chart::new(&orbit, landmarks);
                    x = model.chart.base_params();
                    r = model.residuals(&x);
                    let rel = (cost - cost_new) / cost.max(f64::MIN_POSITIVE);
                    cost = cost_new.min(r.norm_squared());
                    cost_history.push(cost);
                    lambda = (lambda * 0.5).max(1e-15);
                    accepted = true;
                    if rel < opts.rel_cost_tol {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                // No acceptable step exists at any damping: the relative
                // decrease is below tolerance.
                converged = true;
                break;
            }
        }
        if !accepted || converged {
            break;
        }
    }

    let mut orbit = model.chart.orbit_at(&model.chart.base_params());
    let mut landmarks = model.chart.landmarks.clone();
    if opts.anchor_gauge && cost_history.len() > 1 {
        let t_ref = model.windows.first().map_or(0.0, |&k| k as f64 * opts.dt);
        if let Some((a_orbit, a_landmarks)) =
            anchor_gauge(&orbit, &landmarks, &init.orbit.n, &init.orbit.c, t_ref)
        {
            orbit = a_orbit;
            landmarks = a_landmarks;
        }
    }
    debug_assert!((orbit.n.norm() - 1.0).abs() < 1e-9);
    debug_assert!((orbit.u.norm() - 1.0).abs() < 1e-9);
    debug_assert!(orbit.orthogonality_error() < 1e-9);

    let raw = {
        let (res, _) = crate::orbit::residuals(
            &orbit,
            &landmarks,
            observations,
            &init.intrinsics,
            opts.dt,
            opts.residual_cap,
        );
        res
    };
    Ok(Reconstruction {
        orbit,
        landmarks,
        intrinsics: init.intrinsics,
        dt: opts.dt,
        rms_reprojection: rms_px(&raw),
        converged,
        cost_history,
        iterations,
    })
}

/// Midpoint triangulation of each track from its two most temporally
/// separated observations under the initial orbit, refined per landmark by a
/// small two-view Levenberg-Marquardt solve. Tracks with fewer than two
/// observations or parallel rays are dropped.
///
/// Returns the landmarks, the kept original track ids (in landmark order)
/// and the observations re-indexed to landmark indices.
pub fn triangulate_landmarks(
    observations: &[Observation],
    orbit: &OrbitParams,
    k: &CameraIntrinsics,
    dt: f64,
) -> Result<(Landmarks, Vec<usize>, Vec<Observation>)> {
    let mut by_track: std::collections::BTreeMap<usize, Vec<&Observation>> = Default::default();
    for obs in observations {
        by_track.entry(obs.track).or_default().push(obs);
    }

    let mut landmarks = Landmarks::new();
    let mut kept = Vec::new();
    for (track, track_obs) in &by_track {
        if track_obs.len() < 2 {
            continue;
        }
        let first = track_obs
            .iter()
            .min_by_key(|o| o.window)
            .expect("non-empty");
        let last = track_obs
            .iter()
            .max_by_key(|o| o.window)
            .expect("non-empty");
        let (Ok(pose_a), Ok(pose_b)) = (
            orbit_pose(first.window as f64 * dt, orbit),
            orbit_pose(last.window as f64 * dt, orbit),
        ) else {
            continue;
        };
        let Some(x0) = midpoint_triangulate(&pose_a, first.px, &pose_b, last.px, k) else {
            continue;
        };
        let x = refine_two_view(x0, &pose_a, first.px, &pose_b, last.px, k);
        landmarks.push(x);
        kept.push(*track);
    }
    if landmarks.is_empty() {
        return Err(Error::DegenerateGeometry(
            "no track could be triangulated".into(),
        ));
    }

    let index_of: std::collections::BTreeMap<usize, usize> = kept
        .iter()
        .enumerate()
        .map(|(i, &orig)| (orig, i))
        .collect();
    let remapped: Vec<Observation> = observations
        .iter()
        .filter_map(|o| {
            index_of.get(&o.track).map(|&track| Observation {
                track,
                window: o.window,
                px: o.px,
            })
        })
        .collect();
    Ok((landmarks, kept, remapped))
}

fn backproject(pose: &CameraPose, px: Vector2<f64>, k: &CameraIntrinsics) -> Vector3<f64> {
    let dir_cam = Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
    (pose.rotation.inverse() * dir_cam).normalize()
}

fn midpoint_triangulate(
    pose_a: &CameraPose,
    px_a: Vector2<f64>,
    pose_b: &CameraPose,
    px_b: Vector2<f64>,
    k: &CameraIntrinsics,
) -> Option<Vector3<f64>> {
    let c1 = pose_a.center();
    let c2 = pose_b.center();
    let d1 = backproject(pose_a, px_a, k);
    let d2 = backproject(pose_b, px_b, k);
    let w = c2 - c1;
    let b = d1.dot(&d2);
    let denom = 1.0 - b * b;
    if denom < 1e-12 {
        return None;
    }
    let e = d1.dot(&w);
    let f = d2.dot(&w);
    let s = (e - b * f) / denom;
    let t = (b * e - f) / denom;
    Some(0.5 * ((c1 + s * d1) + (c2 + t * d2)))
}

/// Two-view point refinement: LM over the 3D point minimizing both
/// reprojection errors, numeric Jacobian.
fn refine_two_view(
    x0: Vector3<f64>,
    pose_a: &CameraPose,
    px_a: Vector2<f64>,
    pose_b: &CameraPose,
    px_b: Vector2<f64>,
    k: &CameraIntrinsics,
) -> Vector3<f64> {
    let residual = |x: &Vector3<f64>| -> Option<nalgebra::Vector4<f64>> {
        let (ua, va) = pose_a.project(x, k).ok()?;
        let (ub, vb) = pose_b.project(x, k).ok()?;
        Some(nalgebra::Vector4::new(
            ua - px_a.x,
            va - px_a.y,
            ub - px_b.x,
            vb - px_b.y,
        ))
    };
    let Some(mut r) = residual(&x0) else {
        return x0;
    };
    let mut x = x0;
    let mut lambda = 1e-6;
    for _ in 0..20 {
        let mut j = nalgebra::Matrix4x3::zeros();
        let mut valid = true;
        for coord in 0..3 {
            let h = 1e-6 * x[coord].abs().max(1.0);
            let mut xp = x;
            xp[coord] += h;
            let mut xm = x;
            xm[coord] -= h;
            match (residual(&xp), residual(&xm)) {
                (Some(rp), Some(rm)) => {
                    for row in 0..4 {
                        j[(row, coord)] = (rp[row] - rm[row]) / (2.0 * h);
                    }
                }
                _ => {
                    valid = false;
                    break;
                }
            }
        }
        if !valid {
            break;
        }
        let jtj = j.transpose() * j;
        let g = j.transpose() * r;
        let mut damped = jtj;
        for i in 0..3 {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
            lambda *= 10.0;
            continue;
        };
        let x_new = x + step;
        match residual(&x_new) {
            Some(r_new) if r_new.norm_squared() < r.norm_squared() => {
                x = x_new;
                r = r_new;
                lambda = (lambda * 0.5).max(1e-12);
                if r.norm_squared() < 1e-24 {
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e8 {
                    break;
                }
            }
        }
    }
    x
}
