//! Analytic smooth-dielectric renderer used as ground truth.
//!
//! The viewing ray is split once at the entry interface into a reflected and
//! a transmitted part. The transmitted part follows the exact Snell path
//! through the object: interior interfaces transmit fully, or reflect fully on
//! total internal reflection.

mod camera;
mod dataset;

use rayon::prelude::*;

pub use camera::{fibonacci_cameras, Camera, DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG};
pub use dataset::{generate_dataset, split_assignment, Dataset, DatasetMeta, DatasetSpec, Split, View};

use crate::envmap::EnvironmentMap;
use crate::image::{Image, Mask};
use crate::math::{Ray, Rgb, Vec3};
use crate::optics::{fresnel_reflectance, reflect, refract, IorPair, IOR_AIR};
use crate::sdf::{inside_trace, sphere_trace, DistanceField, SdfField, SurfaceHit};

type V = Vec3<f64>;

/// Default cap on interfaces along one transmitted path.
pub const DEFAULT_B_MAX: usize = 8;

/// Outcome of following the transmitted ray through the object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DielectricPath {
    /// Unit travel direction after the last interface.
    pub exit_direction: V,
    /// Point where the path left the object (last interface reached otherwise).
    pub exit_point: V,
    /// Interfaces visited, the entry included.
    pub bounce_count: usize,
    pub tir_count: usize,
    pub escaped: bool,
}

/// Object, lighting and indices of refraction.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub field: SdfField,
    pub env: EnvironmentMap,
    pub ior_object: f64,
    pub ior_air: f64,
    pub b_max: usize,
}

impl SyntheticScene {
    pub fn new(field: SdfField, env: EnvironmentMap, ior_object: f64) -> Self {
        Self {
            field,
            env,
            ior_object,
            ior_air: IOR_AIR,
            b_max: DEFAULT_B_MAX,
        }
    }

    /// Air to object.
    pub fn entry_ior(&self) -> IorPair {
        IorPair::new(self.ior_air, self.ior_object)
    }
}

/// Follows the refracted ray from `entry` until it leaves the object.
pub fn trace_dielectric(
    field: &dyn DistanceField,
    entry: &SurfaceHit,
    omega_i: V,
    ior: IorPair,
    b_max: usize,
) -> DielectricPath {
    debug_assert!(entry.hit);
    let mut dir = match refract(omega_i, entry.n, ior) {
        Ok(t) => t,
        Err(_) => reflect(omega_i, entry.n),
    };
    let mut origin = entry.x;
    let mut path = DielectricPath {
        exit_direction: dir,
        exit_point: origin,
        bounce_count: 1,
        tir_count: 0,
        escaped: false,
    };
    let inner = ior.swapped();
    while path.bounce_count < b_max.max(1) {
        let Ok(next) = inside_trace(field, &Ray::new(origin, dir)) else {
            break;
        };
        path.bounce_count += 1;
        path.exit_point = next.x;
        // incident side is the interior, so the normal flips inward
        let (w, m) = (-dir, -next.n);
        match refract(w, m, inner) {
            Ok(out) => {
                path.exit_direction = out;
                path.escaped = true;
                return path;
            }
            Err(_) => {
                dir = reflect(w, m);
                path.tir_count += 1;
                path.exit_direction = dir;
                origin = next.x;
            }
        }
    }
    path
}

/// Single-interface refraction at the entry point, the guidance target for
/// the ray-bending network. `None` on entry TIR.
pub fn guidance_direction(omega_i: V, n: V, ior: IorPair) -> Option<V> {
    refract(omega_i, n, ior).ok()
}

/// Radiance for a hit whose entry point and exit direction are known.
pub fn shade_hit(env: &EnvironmentMap, omega_i: V, n: V, ior: IorPair, path: &DielectricPath) -> Rgb {
    let e_r = env.sample(reflect(omega_i, n));
    if !path.escaped {
        return e_r;
    }
    let f_r = fresnel_reflectance(omega_i.dot(n).max(0.0), ior).map_or(1.0, |s| s.f_r);
    crate::optics::blend_radiance(f_r, ior, e_r, env.sample(path.exit_direction))
}

/// Per-pixel oracle record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTrace {
    pub radiance: Rgb,
    pub hit: Option<(SurfaceHit, DielectricPath)>,
}

pub fn trace_pixel(scene: &SyntheticScene, ray: &Ray<f64>) -> PixelTrace {
    let hit = sphere_trace(&scene.field, ray);
    if !hit.hit {
        return PixelTrace {
            radiance: Rgb::BLACK,
            hit: None,
        };
    }
    let omega_i = -ray.direction;
    let ior = scene.entry_ior();
    let path = trace_dielectric(&scene.field, &hit, omega_i, ior, scene.b_max);
    PixelTrace {
        radiance: shade_hit(&scene.env, omega_i, hit.n, ior, &path),
        hit: Some((hit, path)),
    }
}

pub fn render_pixel(scene: &SyntheticScene, ray: &Ray<f64>) -> Rgb {
    trace_pixel(scene, ray).radiance
}

/// Traces every pixel of `camera`, row-major.
pub fn trace_view(scene: &SyntheticScene, camera: &Camera) -> Vec<PixelTrace> {
    let w = camera.width;
    (0..w * camera.height)
        .into_par_iter()
        .map(|i| trace_pixel(scene, &camera.ray(i % w, i / w)))
        .collect()
}

/// Rendered image and its hit mask.
pub fn render_image(scene: &SyntheticScene, camera: &Camera) -> (Image, Mask) {
    let traces = trace_view(scene, camera);
    let w = camera.width;
    let image = Image::from_fn(w, camera.height, |x, y| traces[y * w + x].radiance);
    let mask = Mask::from_fn(w, camera.height, |x, y| traces[y * w + x].hit.is_some());
    (image, mask)
}
