//! Import of COLMAP sparse models in text format (`cameras.txt`,
//! `images.txt`, `points3D.txt`).
//!
//! Only the fields needed here are read: PINHOLE/SIMPLE_PINHOLE intrinsics,
//! per-image quaternion + translation, and point ids with positions and
//! track elements. Comment lines starting with `#` are skipped. Image names
//! are expected to encode the temporal window as `win_000123`.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::camera::{CameraIntrinsics, CameraPose, PoseSet, TimedPose};
use crate::error::{Error, Result};

/// One entry of `points3D.txt`.
#[derive(Debug, Clone)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: Vector3<f64>,
    /// (image_id, point2d_idx) track elements.
    pub track: Vec<(u64, u64)>,
}

/// A parsed sparse model.
#[derive(Debug, Clone)]
pub struct ColmapModel {
    pub intrinsics: CameraIntrinsics,
    /// Window index and pose per image, ordered by window.
    pub views: Vec<(usize, CameraPose)>,
    pub points: Vec<ColmapPoint>,
}

impl ColmapModel {
    /// Poses as a timed set, with `t = window * dt`.
    pub fn pose_set(&self, dt: f64) -> PoseSet {
        PoseSet::new(
            self.views
                .iter()
                .map(|(k, pose)| TimedPose {
                    t: *k as f64 * dt,
                    pose: *pose,
                })
                .collect(),
        )
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number '{field}'"),
    })
}

fn parse_u64(field: &str, line: usize) -> Result<u64> {
    field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad integer '{field}'"),
    })
}

fn parse_cameras(text: &str) -> Result<CameraIntrinsics> {
    // Only the first camera is used; windows all share one sensor.
    if let Some((line, l)) = data_lines(text).next() {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 5 {
            return Err(Error::Parse {
                line,
                msg: "camera row too short".into(),
            });
        }
        // CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]
        return match f[1] {
            "PINHOLE" => {
                if f.len() < 8 {
                    return Err(Error::Parse {
                        line,
                        msg: "PINHOLE needs fx fy cx cy".into(),
                    });
                }
                Ok(CameraIntrinsics::new(
                    parse_f64(f[4], line)?,
                    parse_f64(f[5], line)?,
                    parse_f64(f[6], line)?,
                    parse_f64(f[7], line)?,
                ))
            }
            "SIMPLE_PINHOLE" => {
                if f.len() < 7 {
                    return Err(Error::Parse {
                        line,
                        msg: "SIMPLE_PINHOLE needs f cx cy".into(),
                    });
                }
                let fl = parse_f64(f[4], line)?;
                Ok(CameraIntrinsics::new(
                    fl,
                    fl,
                    parse_f64(f[5], line)?,
                    parse_f64(f[6], line)?,
                ))
            }
            other => Err(Error::Validation(format!(
                "line {line}: unsupported camera model '{other}'"
            ))),
        };
    }
    Err(Error::Validation("cameras.txt contains no camera".into()))
}

/// Extracts the window index from an image name like `win_000123.png`.
fn window_from_name(name: &str, line: usize) -> Result<usize> {
    let stem = name.rsplit('/').next().unwrap_or(name);
    let digits: String = stem
        .strip_prefix("win_")
        .map(|rest| rest.chars().take_while(|c| c.is_ascii_digit()).collect())
        .unwrap_or_default();
    if digits.is_empty() {
        return Err(Error::Parse {
            line,
            msg: format!("image name '{name}' does not encode a window (expected win_<k>)"),
        });
    }
    digits.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad window index in '{name}'"),
    })
}

fn parse_images(text: &str) -> Result<Vec<(usize, CameraPose)>> {
    let mut views = Vec::new();
    let mut expect_points_line = false;
    for (line, l) in data_lines(text) {
        if expect_points_line {
            // 2D point row; ignored.
            expect_points_line = false;
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 10 {
            return Err(Error::Parse {
                line,
                msg: "image row needs ID QW QX QY QZ TX TY TZ CAMERA_ID NAME".into(),
            });
        }
        let qw = parse_f64(f[1], line)?;
        let qx = parse_f64(f[2], line)?;
        let qy = parse_f64(f[3], line)?;
        let qz = parse_f64(f[4], line)?;
        let t = Vector3::new(
            parse_f64(f[5], line)?,
            parse_f64(f[6], line)?,
            parse_f64(f[7], line)?,
        );
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        let rotation: Rotation3<f64> = q.to_rotation_matrix();
        let window = window_from_name(f[9], line)?;
        views.push((window, CameraPose::new(rotation, t)));
        expect_points_line = true;
    }
    views.sort_by_key(|(k, _)| *k);
    Ok(views)
}

fn parse_points(text: &str) -> Result<Vec<ColmapPoint>> {
    let mut points = Vec::new();
    for (line, l) in data_lines(text) {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 8 {
            return Err(Error::Parse {
                line,
                msg: "point row needs ID X Y Z R G B ERROR [TRACK]".into(),
            });
        }
        let id = parse_u64(f[0], line)?;
        let xyz = Vector3::new(
            parse_f64(f[1], line)?,
            parse_f64(f[2], line)?,
            parse_f64(f[3], line)?,
        );
        let mut track = Vec::new();
        let tail = &f[8..];
        for pair in tail.chunks(2) {
            if pair.len() == 2 {
                track.push((parse_u64(pair[0], line)?, parse_u64(pair[1], line)?));
            }
        }
        points.push(ColmapPoint { id, xyz, track });
    }
    Ok(points)
}

/// Loads a COLMAP text model from a directory containing `cameras.txt`,
/// `images.txt` and `points3D.txt`.
pub fn load_model<P: AsRef<Path>>(dir: P) -> Result<ColmapModel> {
    let dir = dir.as_ref();
    let cameras = fs::read_to_string(dir.join("cameras.txt"))?;
    let images = fs::read_to_string(dir.join("images.txt"))?;
    let points = fs::read_to_string(dir.join("points3D.txt"))?;
    Ok(ColmapModel {
        intrinsics: parse_cameras(&cameras)?,
        views: parse_images(&images)?,
        points: parse_points(&points)?,
    })
}
