//! Pinhole cameras.
//!
//! Convention used everywhere in the crate: the camera frame is right-handed
//! with +z looking forward, +x to the right and +y down. A pixel is addressed
//! as `(i, j)` = (column, row) and integer pixel `(i, j)` has its center at the
//! continuous image coordinate `(i + 0.5, j + 0.5)`. Depth is the camera-frame
//! z coordinate of a point, not its distance along the ray.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Ray;

/// Rigid transform `x_world = rotation * x_cam + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with world `up` used to fix roll.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at eye coincides with target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at direction is parallel to up"))?;
        let down = forward.cross(&right);
        Ok(Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_3x4(m: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_from_camera: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_from_camera: RigidTransform,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_from_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera with the given horizontal field of view (radians)
    /// and the principal point at the image center.
    pub fn with_fov(
        width: usize,
        height: usize,
        fov_x: f64,
        world_from_camera: RigidTransform,
    ) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            world_from_camera,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        let r = &self.world_from_camera.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera rotation must be orthonormal with det +1"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.world_from_camera.translation
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.world_from_camera.rotation.column(2).into_owned()
    }

    /// Continuous image coordinates of the center of integer pixel `(i, j)`.
    pub fn pixel_center(i: usize, j: usize) -> (f64, f64) {
        (i as f64 + 0.5, j as f64 + 0.5)
    }

    fn check_bounds(&self, u: f64, v: f64) -> Result<()> {
        if !(u >= 0.0 && u <= self.width as f64 && v >= 0.0 && v <= self.height as f64) {
            return Err(Error::invalid(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame direction with unit z for image coordinate `(u, v)`.
    pub fn camera_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// World-frame vector `q` such that the point at depth `d` is `center + d q`.
    pub fn depth_axis(&self, u: f64, v: f64) -> Vector3<f64> {
        self.world_from_camera.rotation * self.camera_ray(u, v)
    }

    /// World point seen at image coordinate `(u, v)` with depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        self.check_bounds(u, v)?;
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.center() + depth * self.depth_axis(u, v))
    }

    /// Image coordinates and depth of a world point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_from_camera.apply_inverse(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray> {
        self.check_bounds(u, v)?;
        Ok(Ray::new(self.center(), self.depth_axis(u, v)))
    }

    /// Ray through the center of integer pixel `(i, j)`.
    pub fn ray_through_pixel(&self, i: usize, j: usize) -> Ray {
        let (u, v) = Self::pixel_center(i, j);
        Ray::new(self.center(), self.depth_axis(u, v))
    }
}
