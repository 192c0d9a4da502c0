//! Pinhole cameras and the hemispherical Fibonacci view lattice.

use serde::{Deserialize, Serialize};

use crate::math::{Ray, Vec3};

type V = Vec3<f64>;

pub const DEFAULT_CAMERA_RADIUS: f64 = 4.0;
pub const DEFAULT_FOV_DEG: f64 = 40.0;

/// Pinhole camera; pixel `(0, 0)` is the top-left corner of the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal view frame.
#[derive(Clone, Copy, Debug)]
struct Frame {
    forward: V,
    right: V,
    up: V,
}

impl Camera {
    /// Looks from `position` at `look_at`; `up` falls back to +z when it is
    /// nearly parallel to the view axis.
    pub fn look_at(position: V, look_at: V, up: V, fov_deg: f64, width: usize, height: usize) -> Self {
        let forward = (look_at - position).normalize();
        let up = if forward.cross(up.normalize()).norm() < 1e-3 {
            V::new(0.0, 0.0, 1.0)
        } else {
            up.normalize()
        };
        Self {
            position: position.to_array(),
            look_at: look_at.to_array(),
            up: up.to_array(),
            fov_deg,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = V::from_array(self.position);
        let l = V::from_array(self.look_at);
        if (l - p).norm() <= 1e-12 {
            return Err("camera position coincides with its target".into());
        }
        if (l - p).normalize().cross(V::from_array(self.up)).norm() < 1e-6 {
            return Err("camera up vector is parallel to the view axis".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(format!("field of view {} outside (0, 180)", self.fov_deg));
        }
        if self.width == 0 || self.height == 0 {
            return Err("camera resolution must be positive".into());
        }
        Ok(())
    }

    pub fn origin(&self) -> V {
        V::from_array(self.position)
    }

    fn frame(&self) -> Frame {
        let forward = (V::from_array(self.look_at) - self.origin()).normalize();
        let right = forward.cross(V::from_array(self.up)).normalize();
        Frame {
            forward,
            right,
            up: right.cross(forward),
        }
    }

    /// Primary ray through the center of pixel `(px, py)`.
    pub fn ray(&self, px: usize, py: usize) -> Ray<f64> {
        self.ray_at(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Ray through continuous image coordinates (pixels, origin top-left).
    pub fn ray_at(&self, u: f64, v: f64) -> Ray<f64> {
        let f = self.frame();
        let half = (0.5 * self.fov_deg).to_radians().tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * u / self.width as f64 - 1.0) * half * aspect;
        let sy = (1.0 - 2.0 * v / self.height as f64) * half;
        Ray::new(self.origin(), (f.forward + f.right * sx + f.up * sy).normalize())
    }

    /// All primary rays, row-major.
    pub fn rays(&self) -> Vec<Ray<f64>> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.ray(x, y));
            }
        }
        out
    }
}

/// `n` cameras on the upper hemisphere of radius `radius` around `look_at`.
pub fn fibonacci_cameras(n: usize, radius: f64, look_at: V, fov_deg: f64, width: usize, height: usize) -> Vec<Camera> {
    let golden = 2.0 * std::f64::consts::PI * (1.0 - 2.0 / (1.0 + 5f64.sqrt()));
    (0..n)
        .map(|i| {
            let y = 1.0 - i as f64 / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            let dir = V::new(r * phi.cos(), y, r * phi.sin());
            Camera::look_at(
                look_at + dir * radius,
                look_at,
                V::new(0.0, 1.0, 0.0),
                fov_deg,
                width,
                height,
            )
        })
        .collect()
}
