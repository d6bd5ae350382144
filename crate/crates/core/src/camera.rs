//! Pinhole camera with a camera-from-world rigid pose.
//!
//! Pixel convention: pixel (i, j) has its center at continuous coordinate
//! (i + 0.5, j + 0.5). Every module (detection, bilinear sampling,
//! projection, rasterization) shares this.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Smallest camera-space z accepted by [`Camera::project`].
pub const BEHIND_EPS: f64 = 1e-8;

/// Smallest image side; one detection patch.
pub const MIN_IMAGE_SIDE: usize = 14;

/// Pinhole intrinsics + camera-from-world extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-from-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera-from-world translation (scene units).
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::InvalidCamera(format!(
                "image size {width}x{height} below minimum {MIN_IMAGE_SIDE}"
            )));
        }
        let residual = (rotation * rotation.transpose() - Matrix3::identity()).norm();
        if residual > 1e-9 {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (|R R^T - I| = {residual:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant {det} != +1"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Identity-pose camera, convenient in tests.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Camera::new(
            fx,
            fy,
            cx,
            cy,
            Matrix3::identity(),
            Vector3::zeros(),
            width,
            height,
        )
        .expect("identity camera is valid")
    }

    /// World point into the camera frame.
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    /// Camera-frame point back to world.
    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Project a world point to continuous pixel coordinates and depth.
    ///
    /// Depth is the camera-space z, not the ray length.
    pub fn project(&self, p_world: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let p = self.to_camera(p_world);
        if p.z <= BEHIND_EPS {
            return Err(Error::BehindCamera { z: p.z });
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        Ok((u, v, p.z))
    }

    /// Camera-frame point on the ray through (u, v) at the given depth.
    pub fn camera_point(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 {
            return Err(Error::InvalidDepth { depth });
        }
        Ok(Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Unproject a pixel at the given depth into world coordinates.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        Ok(self.to_world(&self.camera_point(u, v, depth)?))
    }

    /// Unnormalized camera-frame ray direction with unit z. Walking `depth`
    /// units along it reaches camera-space depth `depth`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}
