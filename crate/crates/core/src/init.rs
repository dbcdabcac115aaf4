//! Orbit initialization: least-squares plane and circle fits to camera
//! centers, dominant-frequency estimation from the event stream, and
//! assembly of initial orbit parameters.

use nalgebra::{DMatrix, DVector, Rotation3, Unit, Vector3};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::camera::PoseSet;
use crate::error::{Error, Result};
use crate::event::EventStream;
use crate::geometry::{chordal_mean, rotation_to};
use crate::orbit::{orbit_pose, OrbitParams};

/// A circle fitted to 3D points.
#[derive(Debug, Clone)]
pub struct CircleFit {
    /// Unit plane normal (oriented so the points run counter-clockwise).
    pub n: Unit<Vector3<f64>>,
    /// Circle center, world units.
    pub c: Vector3<f64>,
    /// Radius, world units.
    pub r: f64,
    /// Unit in-plane direction from the center to the first input point.
    pub u: Unit<Vector3<f64>>,
    /// RMS geometric distance of the points to the fitted circle.
    pub rms_residual: f64,
}

/// Relative singular-value threshold below which the z = ax + by + d
/// regression is considered ill-conditioned.
const PLANE_COND_TOL: f64 = 1e-8;

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Total-least-squares plane normal: the singular direction of the centered
/// point matrix with the smallest singular value. Errors when the points are
/// collinear (the two smallest singular values are both ~0).
fn tls_normal(centered: &DMatrix<f64>) -> Result<Vector3<f64>> {
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let sv = &svd.singular_values;
    if sv.len() < 3 || sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::DegenerateGeometry(
            "points are collinear or coincident; no unique plane".into(),
        ));
    }
    let row = vt.row(2);
    Ok(Vector3::new(row[0], row[1], row[2]))
}

/// Least-squares plane through `points`, returned as a unit normal and the
/// centroid. Solves `z = a x + b y + d` on mean-centered points and
/// normalizes `(a, b, -1)`; falls back to the total-least-squares normal
/// when that regression is rank-deficient (near-vertical plane). The normal
/// is oriented so the points traverse counter-clockwise about it in input
/// order.
pub fn fit_plane(points: &[Vector3<f64>]) -> Result<(Unit<Vector3<f64>>, Vector3<f64>)> {
    if points.len() < 3 {
        return Err(Error::Precondition(format!(
            "plane fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let t_c = centroid(points);
    let n_pts = points.len();
    let mut centered = DMatrix::zeros(n_pts, 3);
    for (i, p) in points.iter().enumerate() {
        let q = p - t_c;
        centered[(i, 0)] = q.x;
        centered[(i, 1)] = q.y;
        centered[(i, 2)] = q.z;
    }

    let mut design = DMatrix::zeros(n_pts, 3);
    let mut rhs = DVector::zeros(n_pts);
    for i in 0..n_pts {
        design[(i, 0)] = centered[(i, 0)];
        design[(i, 1)] = centered[(i, 1)];
        design[(i, 2)] = 1.0;
        rhs[i] = centered[(i, 2)];
    }
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.iter().cloned().fold(0.0, f64::max);
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);

    let raw = if min_sv > PLANE_COND_TOL * max_sv {
        let sol = svd.solve(&rhs, 0.0).map_err(|e| {
            Error::DegenerateGeometry(format!("plane regression failed: {e}"))
        })?;
        Vector3::new(sol[0], sol[1], -1.0)
    } else {
        tls_normal(&centered)?
    };
    let mut n = Unit::new_normalize(raw);

    // Orient so the points run counter-clockwise about n with increasing
    // input order.
    let mut swept = 0.0;
    for w in points.windows(2) {
        swept += (w[0] - t_c).cross(&(w[1] - t_c)).dot(&n);
    }
    if swept < 0.0 {
        n = Unit::new_unchecked(-n.into_inner());
    }
    Ok((n, t_c))
}

/// Least-squares circle through `points` lying near the plane `(n, t_c)`.
/// Mean-centered points are rotated so the plane normal aligns with z, the
/// implicit circle equation `x^2 + y^2 = th1 x + th2 y + th3` is solved
/// linearly, and the center is rotated back.
pub fn fit_circle(
    points: &[Vector3<f64>],
    n: &Unit<Vector3<f64>>,
    t_c: &Vector3<f64>,
) -> Result<CircleFit> {
    if points.len() < 3 {
        return Err(Error::Precondition(format!(
            "circle fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let to_z = rotation_to(n, &Unit::new_unchecked(Vector3::z()));
    let planar: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let q = to_z * (p - t_c);
            (q.x, q.y)
        })
        .collect();

    let m = points.len();
    let mut design = DMatrix::zeros(m, 3);
    let mut rhs = DVector::zeros(m);
    for (i, &(x, y)) in planar.iter().enumerate() {
        design[(i, 0)] = x;
        design[(i, 1)] = y;
        design[(i, 2)] = 1.0;
        rhs[i] = x * x + y * y;
    }
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.iter().cloned().fold(0.0, f64::max);
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_sv <= 1e-10 * max_sv.max(1e-300) {
        return Err(Error::DegenerateGeometry(
            "circle fit is rank-deficient (collinear or coincident points)".into(),
        ));
    }
    let theta = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::DegenerateGeometry(format!("circle solve failed: {e}")))?;

    let r2 = theta[2] + (theta[0] / 2.0).powi(2) + (theta[1] / 2.0).powi(2);
    if !r2.is_finite() || r2 <= 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "circle radius is not real (r^2 = {r2})"
        )));
    }
    let r = r2.sqrt();
    let c = to_z.inverse() * Vector3::new(theta[0] / 2.0, theta[1] / 2.0, 0.0) + t_c;

    let first = points[0] - c;
    let in_plane = first - n.dot(&first) * n.into_inner();
    if in_plane.norm() < 1e-12 {
        return Err(Error::DegenerateGeometry(
            "first point coincides with the circle center".into(),
        ));
    }
    let u = Unit::new_normalize(in_plane);

    let mut ss = 0.0;
    for p in points {
        let w = p - c;
        let along = n.dot(&w);
        let radial = (w - along * n.into_inner()).norm() - r;
        ss += along * along + radial * radial;
    }
    let rms_residual = (ss / m as f64).sqrt();

    Ok(CircleFit {
        n: *n,
        c,
        r,
        u,
        rms_residual,
    })
}

/// Dominant-frequency estimate of an event stream.
#[derive(Debug, Clone)]
pub struct FrequencyEstimate {
    /// Frequency of the maximum-power bin, refined by quadratic peak
    /// interpolation. Zero when `dominant` is false.
    pub f_hz: f64,
    /// False when the mean-x signal carries no power beyond numerical noise.
    pub dominant: bool,
    /// (frequency, power) pairs up to the Nyquist bin, DC removed.
    pub spectrum: Vec<(f64, f64)>,
}

/// Estimates the dominant temporal frequency of the stream from the
/// per-window mean x coordinate: split the stream into
/// `F = floor(T / dt_f) - 1` windows, build the mean-x signal (empty windows
/// carry the previous value), remove the mean, and take the FFT peak.
pub fn estimate_frequency(stream: &EventStream, dt_f: f64) -> Result<FrequencyEstimate> {
    if dt_f <= 0.0 {
        return Err(Error::Precondition("dt_f must be positive".into()));
    }
    if stream.is_empty() {
        return Err(Error::EmptyStream("no events to estimate a frequency from".into()));
    }
    let duration = stream.duration();
    if duration / dt_f < 8.0 {
        return Err(Error::Precondition(format!(
            "need at least 8 windows of {dt_f} s, stream spans {duration} s"
        )));
    }
    let t0 = stream.t_first();
    let f_windows = (duration / dt_f).floor() as usize - 1;

    let mut sums = vec![0.0f64; f_windows + 1];
    let mut counts = vec![0usize; f_windows + 1];
    for e in &stream.events {
        let rel = e.t - t0;
        if rel <= 0.0 {
            continue;
        }
        let k = (rel / dt_f).ceil() as i64 - 1;
        if k < 1 || k > f_windows as i64 {
            continue;
        }
        sums[k as usize] += e.x as f64;
        counts[k as usize] += 1;
    }

    let mut signal = Vec::with_capacity(f_windows);
    let mut last: Option<f64> = None;
    for k in 1..=f_windows {
        if counts[k] > 0 {
            last = Some(sums[k] / counts[k] as f64);
        }
        signal.push(last.unwrap_or(f64::NAN));
    }
    if last.is_none() {
        return Err(Error::EmptyStream("every sampling window is empty".into()));
    }
    // Backfill windows before the first non-empty one.
    let first_valid = signal.iter().position(|v| v.is_finite()).unwrap();
    let fill = signal[first_valid];
    for v in signal.iter_mut().take(first_valid) {
        *v = fill;
    }

    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let energy: f64 = signal.iter().map(|v| (v - mean) * (v - mean)).sum();

    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);

    let n = buf.len();
    let bin_hz = 1.0 / (n as f64 * dt_f);
    let half = n / 2;
    let power: Vec<f64> = buf.iter().take(half + 1).map(|c| c.norm_sqr()).collect();
    let spectrum: Vec<(f64, f64)> = power
        .iter()
        .enumerate()
        .map(|(j, &p)| (j as f64 * bin_hz, p))
        .collect();

    let noise_floor = 1e-9 * signal.len() as f64 * mean.mul_add(mean, 1.0);
    if energy <= noise_floor {
        return Ok(FrequencyEstimate {
            f_hz: 0.0,
            dominant: false,
            spectrum,
        });
    }

    let mut peak = 1;
    for j in 2..=half {
        if power[j] > power[peak] {
            peak = j;
        }
    }
    // Quadratic interpolation over the peak and its two neighbors.
    let mut offset = 0.0;
    if peak > 1 && peak < half {
        let (pl, pc, pr) = (power[peak - 1], power[peak], power[peak + 1]);
        let denom = pl - 2.0 * pc + pr;
        if denom.abs() > 1e-300 {
            offset = (0.5 * (pl - pr) / denom).clamp(-0.5, 0.5);
        }
    }
    Ok(FrequencyEstimate {
        f_hz: (peak as f64 + offset) * bin_hz,
        dominant: true,
        spectrum,
    })
}

/// Assembles initial orbit parameters from camera poses and a frequency
/// estimate: circle geometry from the plane/circle fits, the phase vector
/// rotated back so time zero stays the stream origin, and `R0` as the
/// chordal mean of the per-pose residual rotations after removing the
/// modeled orbit rotation.
pub fn init_orbit(poses: &PoseSet, f_init: f64) -> Result<OrbitParams> {
    if poses.len() < 3 {
        return Err(Error::Precondition(format!(
            "orbit initialization needs at least 3 poses, got {}",
            poses.len()
        )));
    }
    if !f_init.is_finite() || f_init <= 0.0 {
        return Err(Error::Precondition(format!(
            "frequency estimate must be positive, got {f_init}"
        )));
    }
    let centers = poses.centers();
    let (n, t_c) = fit_plane(&centers)?;
    let fit = fit_circle(&centers, &n, &t_c)?;
    if fit.r < 1e-9 {
        return Err(Error::DegenerateGeometry(format!(
            "orbit radius ~ 0 ({})",
            fit.r
        )));
    }

    // The fitted u points at the first camera center; rotate it back by the
    // first pose's phase so u refers to time zero.
    let t1 = poses.poses[0].t;
    let back = Rotation3::from_axis_angle(&fit.n, -std::f64::consts::TAU * f_init * t1);
    let u0 = back * fit.u.into_inner();

    let mut orbit = OrbitParams::new(fit.r, f_init, Rotation3::identity(), fit.n, u0, fit.c)?;

    // R0: chordal mean of measured-vs-modeled rotation offsets. Each pose is
    // modeled at the phase its center actually occupies on the fitted
    // circle, not at its nominal timestamp, so a frequency-estimate error
    // (whose phase discrepancy grows over the stream) cannot smear the mean.
    let v0 = orbit.v();
    let mut offsets = Vec::with_capacity(poses.len());
    for tp in &poses.poses {
        let w = tp.pose.center() - orbit.c;
        let phase = w.dot(&v0).atan2(w.dot(&orbit.u));
        let t_eff = phase / (std::f64::consts::TAU * f_init);
        let modeled = orbit_pose(t_eff, &orbit)?;
        offsets.push(
            tp.pose.rotation
                * Rotation3::from_matrix_unchecked(modeled.rotation.matrix().transpose()),
        );
    }
    orbit.r0 = chordal_mean(&offsets)?;
    Ok(orbit)
}
