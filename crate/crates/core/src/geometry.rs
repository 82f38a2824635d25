//! Camera intrinsics, camera poses and small geometric helpers shared by the
//! simulator, both maps and the planner.
//!
//! Camera frames follow the pinhole convention: +x right, +y down, +z along
//! the optical axis. Pixel `(u, v)` is sampled at its integer coordinate, so
//! the ray through it has camera-space direction `((u - cx)/fx, (v - cy)/fy, 1)`.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PointCloud = Vec<Point3<f64>>;

/// Camera pose as the camera-to-world rigid transform.
pub type CameraPose = Isometry3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraModel {
    /// Desk-scale 160x120 sensor with a ~67 degree horizontal field of view.
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            fx: 120.0,
            fy: 120.0,
            cx: 79.5,
            cy: 59.5,
            near: 0.05,
            far: 2.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera resolution must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::config("camera clip planes must satisfy 0 < near < far"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-space ray direction through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-space point at z-depth `depth` behind pixel `(u, v)`.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::from(self.pixel_ray(u, v) * depth)
    }

    /// Pixel coordinates of a camera-space point, `None` when behind the near plane.
    #[inline]
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= self.near {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Returns a copy scaled to a new resolution keeping the field of view.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: ((self.width as f64) * factor).round().max(1.0) as usize,
            height: ((self.height as f64) * factor).round().max(1.0) as usize,
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            near: self.near,
            far: self.far,
        }
    }
}

/// Camera pose at `eye` looking at `target`, with image "up" as close to
/// world +z as the viewing direction allows.
pub fn look_at(eye: Point3<f64>, target: Point3<f64>) -> CameraPose {
    look_along(eye, target - eye)
}

/// Camera pose at `eye` with its optical axis along `direction`.
pub fn look_along(eye: Point3<f64>, direction: Vector3<f64>) -> CameraPose {
    let z = direction.normalize();
    let mut up = Vector3::z();
    if z.cross(&up).norm() < 1e-9 {
        up = Vector3::x();
    }
    let y = (-up + z * up.dot(&z)).normalize();
    let x = y.cross(&z);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Isometry3::from_parts(
        Translation3::from(eye.coords),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

/// World-space optical axis of a camera pose.
#[inline]
pub fn optical_axis(pose: &CameraPose) -> Vector3<f64> {
    pose.rotation * Vector3::z()
}

#[inline]
pub fn camera_center(pose: &CameraPose) -> Point3<f64> {
    Point3::from(pose.translation.vector)
}

/// Angle in radians between the optical axes of two poses.
pub fn axis_angle_between(a: &CameraPose, b: &CameraPose) -> f64 {
    optical_axis(a)
        .dot(&optical_axis(b))
        .clamp(-1.0, 1.0)
        .acos()
}

/// Shortest distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
