//! Pinhole projection for the fixed attacker sensor and the moving victim
//! camera.
//!
//! Camera frame: z forward, x rightward, y downward. Pixel convention is
//! i = column (x, rightward), j = row (y, downward), principal point at the
//! image center.

use crate::error::{ElaError, Result};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
}

/// A posed pinhole camera with world-frame basis vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub down: Vec3,
    pub intrinsics: CameraIntrinsics,
}

impl Camera {
    /// Build from a position and a look-at target, world up = +z.
    pub fn look_at(position: Vec3, target: Vec3, intrinsics: CameraIntrinsics) -> Result<Self> {
        let forward = sub(target, position);
        if norm(forward) < 1e-9 {
            return Err(ElaError::Argument("camera target equals position".into()));
        }
        let forward = normalize(forward);
        let up = [0.0, 0.0, 1.0];
        let right = cross(forward, up);
        if norm(right) < 1e-9 {
            return Err(ElaError::Argument("camera looking straight up/down".into()));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        Ok(Self {
            position,
            forward,
            right,
            down,
            intrinsics,
        })
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, point: Vec3) -> f64 {
        dot(sub(point, self.position), self.forward)
    }

    /// Project a world point; `None` when at or behind the camera plane.
    pub fn project(&self, point: Vec3) -> Option<(f64, f64)> {
        let rel = sub(point, self.position);
        let z = dot(rel, self.forward);
        if z <= 1e-9 {
            return None;
        }
        let x = dot(rel, self.right);
        let y = dot(rel, self.down);
        let f = self.intrinsics.focal_px;
        let cx = self.intrinsics.width as f64 / 2.0;
        let cy = self.intrinsics.height as f64 / 2.0;
        Some((cx + f * x / z, cy + f * y / z))
    }
}
