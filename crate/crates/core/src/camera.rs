//! Pinhole camera intrinsics shared by the renderer, the dataset transforms
//! and the geometry stage.
//!
//! Pixel coordinates are continuous with integer values at pixel centers, so
//! pixel `(u, v)` is the ray through `((u - cx) / fx, (v - cy) / fy, 1)`.

use nalgebra::{Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Near clip distance in mm.
    pub near: f64,
    /// Far clip distance in mm.
    pub far: f64,
}

/// 960x540 frame, 1100 px focal length, clip range 10 to 400 mm.
impl Default for CameraModel {
    fn default() -> Self {
        Self::centered(960, 540, 1100.0, 10.0, 400.0)
    }
}

impl CameraModel {
    /// Camera with the principal point at the image center and a square pixel.
    pub fn centered(width: u32, height: u32, focal: f64, near: f64, far: f64) -> Self {
        Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera width and height must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera clip range must satisfy 0 < near < far"));
        }
        Ok(())
    }

    /// Direction (not normalized) of the ray through pixel `(u, v)`, with unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Lifts a pixel with z-depth `z` (mm) into camera coordinates.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pinhole projection; `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<Point2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn contains(&self, px: &Point2<f64>) -> bool {
        px.x >= -0.5
            && px.y >= -0.5
            && px.x < self.width as f64 - 0.5
            && px.y < self.height as f64 - 0.5
    }

    /// Intrinsics after resampling the image to `new_width x new_height`.
    pub fn resized(&self, new_width: u32, new_height: u32) -> Self {
        let sx = new_width as f64 / self.width as f64;
        let sy = new_height as f64 / self.height as f64;
        Self {
            width: new_width,
            height: new_height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            ..*self
        }
    }

    /// Intrinsics after cropping a `width x height` window at `(x0, y0)`.
    pub fn cropped(&self, x0: u32, y0: u32, width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            cx: self.cx - x0 as f64,
            cy: self.cy - y0 as f64,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let cam = CameraModel {
            width: 512,
            height: 512,
            fx: 500.0,
            fy: 500.0,
            cx: 256.0,
            cy: 256.0,
            near: 1.0,
            far: 1000.0,
        };
        assert_eq!(cam.backproject(256.0, 256.0, 100.0), Point3::new(0.0, 0.0, 100.0));
        assert_eq!(cam.backproject(756.0, 256.0, 100.0), Point3::new(100.0, 0.0, 100.0));
        let px = cam.project(&Point3::new(100.0, 0.0, 100.0)).unwrap();
        assert_eq!(px, Point2::new(756.0, 256.0));
    }

    #[test]
    fn invalid_intrinsics_are_rejected() {
        let mut cam = CameraModel::centered(64, 48, 80.0, 10.0, 300.0);
        assert!(cam.validate().is_ok());
        cam.near = 400.0;
        assert!(cam.validate().is_err());
        cam = CameraModel::centered(0, 48, 80.0, 10.0, 300.0);
        assert!(cam.validate().is_err());
    }

    #[test]
    fn resize_then_crop_keeps_projection_consistent() {
        let cam = CameraModel::centered(1920, 1080, 1400.0, 10.0, 300.0);
        let p = Point3::new(12.0, -7.0, 110.0);
        let a = cam.project(&p).unwrap();
        let r = cam.resized(910, 512);
        let b = r.project(&p).unwrap();
        let sx = 910.0 / 1920.0;
        assert!(((a.x + 0.5) * sx - 0.5 - b.x).abs() < 1e-9);
        let c = r.cropped(100, 0, 512, 512).project(&p).unwrap();
        assert!((b.x - 100.0 - c.x).abs() < 1e-9);
    }
}
