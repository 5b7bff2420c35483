use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pinhole camera. Camera space looks down +z with +x right and +y down, so
/// pixel `(u, v)` maps to the direction `((u - cx)/fx, (v - cy)/fy, 1)`.
/// Integer pixel coordinates address pixel centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Columns are the camera x, y, z axes expressed in world coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub position: [f64; 3],
    pub near: f64,
    pub far: f64,
}

/// A unit-direction ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` roughly the world up vector.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: u32, height: u32, near: f64, far: f64) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::param("eye coincides with target"))?;
        let right = forward.cross(&up).try_normalize(1e-12).ok_or_else(|| Error::param("up is parallel to view direction"))?;
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        let cam = Camera {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation: matrix_to_rows(&m),
            position: [eye.x, eye.y, eye.z],
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Orbit camera around `target`: azimuth about world +y from +z, elevation toward +y.
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64, target: Vec3, focal: f64, width: u32, height: u32, near: f64, far: f64) -> Result<Self> {
        let eye = target
            + Vec3::new(
                radius * elevation.cos() * azimuth.sin(),
                radius * elevation.sin(),
                radius * elevation.cos() * azimuth.cos(),
            );
        Self::look_at(eye, target, Vec3::y(), focal, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far]
            .iter()
            .chain(self.position.iter())
            .chain(self.rotation.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("camera has non-finite entries"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::param("camera focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::param(format!("camera needs 0 < near < far, got near={} far={}", self.near, self.far)));
        }
        let r = self.rotation_matrix();
        if ((r.transpose() * r) - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::param("camera rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation.concat())
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation_matrix().column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix().transpose() * (p - self.center())
    }

    /// Pixel coordinates of a camera-space point with positive depth.
    pub fn project_camera(&self, pc: &Vec3) -> (f64, f64) {
        (self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Ray through pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray { origin: self.center(), direction: (self.rotation_matrix() * d).normalize() }
    }

    /// Rays through the centers of the given `(column, row)` pixels.
    pub fn rays(&self, pixels: &[(u32, u32)], width: u32, height: u32) -> Result<Vec<Ray>> {
        pixels
            .iter()
            .map(|&(x, y)| {
                if x >= width || y >= height {
                    return Err(Error::param(format!("pixel ({x}, {y}) outside {width}x{height} image")));
                }
                Ok(self.ray(x as f64, y as f64))
            })
            .collect()
    }
}

pub(crate) fn matrix_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
}
