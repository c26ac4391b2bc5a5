//! Pinhole camera.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("camera position coincides with the look-at point")]
    ZeroView,
    #[error("up vector is parallel to the view direction")]
    UpParallel,
    #[error("vertical field of view {0} outside (0, 180) degrees")]
    Fov(f64),
    #[error("resolution {0}x{1} must be non-zero")]
    Resolution(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub vfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    spec: CameraSpec,
    origin: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half: f64,
}

impl Camera {
    pub fn new(spec: CameraSpec) -> Result<Self, CameraError> {
        if spec.width == 0 || spec.height == 0 {
            return Err(CameraError::Resolution(spec.width, spec.height));
        }
        if !(spec.vfov_deg > 0.0 && spec.vfov_deg < 180.0) {
            return Err(CameraError::Fov(spec.vfov_deg));
        }
        let origin = Vec3::from(spec.position);
        let view = Vec3::from(spec.look_at) - origin;
        if !(view.norm() > 0.0) {
            return Err(CameraError::ZeroView);
        }
        let forward = view.normalize();
        let right = forward.cross(&Vec3::from(spec.up));
        if !(right.norm() > 1e-9) {
            return Err(CameraError::UpParallel);
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let tan_half = (spec.vfov_deg.to_radians() * 0.5).tan();
        Ok(Self {
            spec,
            origin,
            forward,
            right,
            up,
            tan_half,
        })
    }

    pub fn spec(&self) -> &CameraSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    /// Unit ray direction through image position `(x, y)` in pixels, `y`
    /// counted from the top row.
    pub fn ray(&self, x: f64, y: f64) -> Vec3 {
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let sx = (2.0 * x / w - 1.0) * self.tan_half * w / h;
        let sy = (1.0 - 2.0 * y / h) * self.tan_half;
        (self.forward + self.right * sx + self.up * sy).normalize()
    }

    /// Ray through the centre of pixel `(i, j)`.
    pub fn pixel_ray(&self, i: usize, j: usize) -> Vec3 {
        self.ray(i as f64 + 0.5, j as f64 + 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CameraSpec {
        CameraSpec {
            position: [0.0, 0.0, -5.0],
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            vfov_deg: 40.0,
            width: 4,
            height: 2,
        }
    }

    #[test]
    fn central_ray_points_at_target() {
        let c = Camera::new(spec()).unwrap();
        let d = c.ray(2.0, 1.0);
        assert!((d - Vec3::z()).norm() < 1e-12);
        assert!(c.ray(2.0, 0.0).y > 0.0);
        assert!(c.ray(4.0, 1.0).x < 0.0);
        let top = c.ray(2.0, 0.0);
        assert!((top.y.atan2(top.z) - 20f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate() {
        let mut s = spec();
        s.look_at = s.position;
        assert_eq!(Camera::new(s).unwrap_err(), CameraError::ZeroView);
        let mut s = spec();
        s.up = [0.0, 0.0, 1.0];
        assert_eq!(Camera::new(s).unwrap_err(), CameraError::UpParallel);
        let mut s = spec();
        s.width = 0;
        assert!(Camera::new(s).is_err());
        let mut s = spec();
        s.vfov_deg = 180.0;
        assert!(Camera::new(s).is_err());
    }
}
