//! Small rotation and alignment helpers shared across the crate.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Rotation that maps direction `from` onto direction `to` about the axis
/// `from x to` (Rodrigues construction). Falls back to a half-turn about an
/// arbitrary perpendicular axis when the directions are opposite.
pub fn rotation_to(from: &Unit<Vector3<f64>>, to: &Unit<Vector3<f64>>) -> Rotation3<f64> {
    match Rotation3::rotation_between(from, to) {
        Some(r) => r,
        None => {
            let axis = any_perpendicular(from);
            Rotation3::from_axis_angle(&axis, std::f64::consts::PI)
        }
    }
}

/// Any unit vector perpendicular to `v`.
pub fn any_perpendicular(v: &Unit<Vector3<f64>>) -> Unit<Vector3<f64>> {
    let candidate = if v.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    Unit::new_normalize(v.cross(&candidate))
}

/// Look-at rotation for a forward direction `d` (unit). Maps `d` to the
/// camera +z axis; built from `d` and the hint y = (0, 1, 0) as rows
/// (normalize(y - (y.d) d), -normalize(y x d), d).
///
/// Degenerate when `d` is parallel to the hint.
pub fn look_at(d: &Unit<Vector3<f64>>) -> Result<Rotation3<f64>> {
    let y = Vector3::y();
    let yd = y.dot(d);
    let s2 = 1.0 - yd * yd;
    if s2 < 1e-18 {
        return Err(Error::DegenerateGeometry(
            "look-at direction parallel to the y hint".into(),
        ));
    }
    let s = s2.sqrt();
    let row0 = (y - yd * d.into_inner()) / s;
    let row1 = -y.cross(d) / s;
    let m = Matrix3::from_rows(&[row0.transpose(), row1.transpose(), d.transpose()]);
    Ok(Rotation3::from_matrix_unchecked(m))
}

/// Nearest rotation matrix (Frobenius sense) to an arbitrary 3x3 matrix,
/// via SVD with a determinant sign fix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let det = (u * vt).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    Rotation3::from_matrix_unchecked(u * s * vt)
}

/// Chordal mean of a set of rotations: average the matrices and project back
/// onto SO(3).
pub fn chordal_mean(rotations: &[Rotation3<f64>]) -> Result<Rotation3<f64>> {
    if rotations.is_empty() {
        return Err(Error::Precondition("chordal mean of empty set".into()));
    }
    let mut acc = Matrix3::zeros();
    for r in rotations {
        acc += r.matrix();
    }
    acc /= rotations.len() as f64;
    Ok(nearest_rotation(&acc))
}

/// Angle in degrees between two unit vectors, ignoring sign (min over +/-b).
pub fn axis_angle_deg(a: &Unit<Vector3<f64>>, b: &Unit<Vector3<f64>>) -> f64 {
    let c = a.dot(b).abs().clamp(0.0, 1.0);
    c.acos().to_degrees()
}

/// Rotation angle of `a * b^-1` in degrees. The trace is clamped so that
/// round-off slightly past +-1 cannot produce NaN.
pub fn rotation_angle_deg(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let m = a * b.inverse();
    let c = ((m.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}
