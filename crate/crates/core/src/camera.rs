//! Pinhole camera model: per-view poses and pixel-to-ray conversion.
//!
//! Convention: right-handed world, camera looks along its -z axis, image y
//! points down, pixel centers at half-integer offsets. `synth` and `render`
//! both rely on this convention.

use crate::vec3::{Mat3, Vec3};
use serde::{Deserialize, Serialize};

/// Shared pinhole intrinsics (focal lengths and principal point in pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Symmetric intrinsics with a given horizontal field of view (radians).
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Intrinsics {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width < 1 || self.height < 1 {
            return Err(format!(
                "image dimensions must be >= 1, got {}x{}",
                self.width, self.height
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            ));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 {
            return Err(format!("principal point cx={} outside image", self.cx));
        }
        if self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(format!("principal point cy={} outside image", self.cy));
        }
        Ok(())
    }
}

/// Camera-to-world pose: orthonormal rotation plus camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
        }
    }

    /// Orthonormality residual max(|R^T R - I|), for validation.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr.rows[i][j] - expect).abs());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<(), String> {
        let err = self.orthonormality_error();
        if err > 1e-9 {
            return Err(format!("rotation not orthonormal (residual {err:.3e})"));
        }
        let det = self.rotation.det();
        if (det - 1.0).abs() > 1e-9 {
            return Err(format!("rotation determinant {det} != +1"));
        }
        Ok(())
    }

    /// Row-major 4x4 camera-to-world matrix, as stored in pose files.
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation.rows;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z, //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix4(m: &[f64; 16]) -> Self {
        Pose {
            rotation: Mat3 {
                rows: [
                    [m[0], m[1], m[2]],
                    [m[4], m[5], m[6]],
                    [m[8], m[9], m[10]],
                ],
            },
            translation: Vec3::new(m[3], m[7], m[11]),
        }
    }
}

/// Pixel ray with near/far integration bounds in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// Camera-frame direction through continuous pixel coordinates (x right,
/// y down, origin at the top-left corner), before rotation to world.
fn camera_dir(intr: &Intrinsics, px: f64, py: f64) -> Vec3 {
    Vec3::new(
        (px - intr.cx) / intr.fx,
        -(py - intr.cy) / intr.fy,
        -1.0,
    )
    .normalized()
}

/// World-space ray through the center of pixel (u, v).
pub fn pixel_to_ray(
    intr: &Intrinsics,
    pose: &Pose,
    u: usize,
    v: usize,
    t_near: f64,
    t_far: f64,
) -> Ray {
    assert!(u < intr.width, "pixel column {u} outside width {}", intr.width);
    assert!(v < intr.height, "pixel row {v} outside height {}", intr.height);
    ray_through(intr, pose, u as f64 + 0.5, v as f64 + 0.5, t_near, t_far)
}

/// Ray through arbitrary continuous pixel coordinates (used by `synth` for
/// sub-pixel lookups).
pub fn ray_through(
    intr: &Intrinsics,
    pose: &Pose,
    px: f64,
    py: f64,
    t_near: f64,
    t_far: f64,
) -> Ray {
    assert!(
        t_near >= 0.0 && t_near < t_far,
        "ray bounds must satisfy 0 <= near < far, got [{t_near}, {t_far}]"
    );
    let dir_cam = camera_dir(intr, px, py);
    Ray {
        origin: pose.translation,
        direction: pose.rotation.mul_vec(dir_cam),
        t_near,
        t_far,
    }
}

/// Project a world point to continuous pixel coordinates. Returns None when
/// the point is not in front of the camera. The second value is the depth
/// along the viewing axis.
pub fn project(intr: &Intrinsics, pose: &Pose, world: Vec3) -> Option<([f64; 2], f64)> {
    let cam = pose.rotation.transpose().mul_vec(world - pose.translation);
    let depth = -cam.z;
    if depth <= 0.0 {
        return None;
    }
    let px = intr.cx + intr.fx * cam.x / depth;
    let py = intr.cy - intr.fy * cam.y / depth;
    Some(([px, py], depth))
}

/// Pose whose -z camera axis points from `eye` toward `target`.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
    let forward = target - eye;
    assert!(forward.norm() > 1e-12, "look_at: eye equals target");
    let backward = (-forward).normalized();
    let cross = up.cross(backward);
    assert!(
        cross.norm() > 1e-12,
        "look_at: up vector parallel to viewing direction"
    );
    let right = cross.normalized();
    let true_up = backward.cross(right);
    Pose {
        rotation: Mat3::from_columns(right, true_up, backward),
        translation: eye,
    }
}
