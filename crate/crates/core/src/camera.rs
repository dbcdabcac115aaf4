//! Pinhole camera model and timed pose sets.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum camera-frame depth accepted when projecting.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        CameraIntrinsics { fx, fy, cx, cy }
    }
}

/// Rigid world-to-camera transform: a world point X maps to `R X + t` in
/// camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        CameraPose {
            rotation,
            translation,
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    /// Pinhole projection of a world point. Fails with [`Error::BehindCamera`]
    /// when the camera-frame depth is at or below [`MIN_DEPTH`].
    pub fn project(&self, x_world: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64)> {
        let pc = self.to_camera(x_world);
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera);
        }
        Ok((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    }
}

/// A pose with the time it was observed at.
#[derive(Debug, Clone, Copy)]
pub struct TimedPose {
    pub t: f64,
    pub pose: CameraPose,
}

/// Time-ordered set of camera poses.
#[derive(Debug, Clone, Default)]
pub struct PoseSet {
    pub poses: Vec<TimedPose>,
}

impl PoseSet {
    pub fn new(mut poses: Vec<TimedPose>) -> Self {
        poses.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        PoseSet { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.pose.center()).collect()
    }

    /// Checks every rotation is orthonormal with determinant +1.
    pub fn validate(&self) -> Result<()> {
        for (i, tp) in self.poses.iter().enumerate() {
            let m = tp.pose.rotation.matrix();
            let err = (m.transpose() * m - nalgebra::Matrix3::identity()).norm();
            if err > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "pose {i}: rotation not orthonormal (|R^T R - I| = {err:.2e})"
                )));
            }
        }
        Ok(())
    }
}
