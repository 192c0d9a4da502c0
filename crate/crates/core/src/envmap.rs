//! Equirectangular environment radiance map.
//!
//! Directions map to texture space with `+y` as the zenith:
//! `v = acos(d.y) / pi` and `u = fract(0.5 + atan2(d.x, -d.z) / 2pi)`, so
//! `-z` lands in the middle of the map. Texel centers sit at half-integer
//! coordinates; lookups wrap horizontally and clamp vertically.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::ImageError;
use crate::image::Image;
use crate::math::{Rgb, Vec3};

type V = Vec3<f64>;

/// Texture coordinates of a unit direction.
pub fn dir_to_uv(d: V) -> (f64, f64) {
    let v = d.y.clamp(-1.0, 1.0).acos() / PI;
    let u = (0.5 + d.x.atan2(-d.z) / (2.0 * PI)).rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    let u = if u >= 1.0 { 0.0 } else { u };
    (u, v)
}

/// Unit direction through texture coordinates `(u, v)`; inverse of [`dir_to_uv`].
pub fn uv_to_dir(u: f64, v: f64) -> V {
    let theta = v * PI;
    let phi = (u - 0.5) * 2.0 * PI;
    let s = theta.sin();
    V::new(s * phi.sin(), theta.cos(), -s * phi.cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    image: Image,
}

impl EnvironmentMap {
    pub fn new(image: Image) -> Result<Self, ImageError> {
        if image.width() < 2 || image.height() < 2 {
            return Err(ImageError::InvalidEnvironment(format!(
                "{}x{} is smaller than 2x2",
                image.width(),
                image.height()
            )));
        }
        if let Some(bad) = image.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ImageError::InvalidEnvironment(format!(
                "texel value {bad} is negative or non-finite"
            )));
        }
        Ok(Self { image })
    }

    /// Fills every texel by evaluating `radiance` at the texel-center direction.
    pub fn from_fn(width: usize, height: usize, radiance: impl Fn(V) -> Rgb) -> Result<Self, ImageError> {
        let image = Image::from_fn(width, height, |x, y| {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            radiance(uv_to_dir(u, v))
        });
        Self::new(image)
    }

    pub fn constant(width: usize, height: usize, c: Rgb) -> Result<Self, ImageError> {
        Self::new(Image::from_fn(width, height, |_, _| c))
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn max_texel(&self) -> f64 {
        self.image.data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64
    }

    /// Bilinearly interpolated radiance in direction `d`.
    pub fn sample(&self, d: V) -> Rgb {
        let (u, v) = dir_to_uv(d);
        self.sample_uv(u, v)
    }

    pub fn sample_uv(&self, u: f64, v: f64) -> Rgb {
        let taps = self.taps(u, v);
        let mut out = [0.0; 3];
        for (x, y, w) in taps.iter() {
            let t = self.image.texel(*x, *y);
            for c in 0..3 {
                out[c] += w * t[c] as f64;
            }
        }
        Rgb(out)
    }

    fn taps(&self, u: f64, v: f64) -> [(usize, usize, f64); 4] {
        let (w, h) = (self.width() as isize, self.height() as isize);
        let px = u * w as f64 - 0.5;
        let py = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let x0f = px.floor();
        let y0f = py.floor();
        let fx = px - x0f;
        let fy = py - y0f;
        let x0 = (x0f as isize).rem_euclid(w) as usize;
        let x1 = (x0f as isize + 1).rem_euclid(w) as usize;
        let y0 = y0f as usize;
        let y1 = (y0 + 1).min(h as usize - 1);
        [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ]
    }

    /// Radiance plus its Jacobian with respect to the (unnormalized)
    /// direction components, one row per color channel.
    pub fn sample_with_grad(&self, d: V) -> (Rgb, [V; 3]) {
        let (u, v) = dir_to_uv(d);
        let (w, h) = (self.width() as f64, self.height() as f64);
        let px = u * w - 0.5;
        let py_raw = v * h - 0.5;
        let py = py_raw.clamp(0.0, h - 1.0);
        let x0f = px.floor();
        let y0f = py.floor();
        let fx = px - x0f;
        let fy = py - y0f;
        let wi = self.width() as isize;
        let x0 = (x0f as isize).rem_euclid(wi) as usize;
        let x1 = (x0f as isize + 1).rem_euclid(wi) as usize;
        let y0 = y0f as usize;
        let y1 = (y0 + 1).min(self.height() - 1);
        let t00 = self.image.texel(x0, y0);
        let t10 = self.image.texel(x1, y0);
        let t01 = self.image.texel(x0, y1);
        let t11 = self.image.texel(x1, y1);

        // d(u, v)/d(direction)
        let a = d.x;
        let b = -d.z;
        let r2 = (a * a + b * b).max(1e-12);
        let du = V::new(b / r2, 0.0, a / r2) / (2.0 * PI);
        let s = (1.0 - d.y * d.y).max(1e-12).sqrt();
        let dv = if d.y.abs() < 1.0 {
            V::new(0.0, -1.0 / (PI * s), 0.0)
        } else {
            V::zero()
        };
        let y_clamped = py_raw < 0.0 || py_raw > h - 1.0;

        let mut color = [0.0; 3];
        let mut jac = [V::zero(); 3];
        for c in 0..3 {
            let (c00, c10, c01, c11) = (t00[c] as f64, t10[c] as f64, t01[c] as f64, t11[c] as f64);
            color[c] = (1.0 - fx) * (1.0 - fy) * c00 + fx * (1.0 - fy) * c10 + (1.0 - fx) * fy * c01 + fx * fy * c11;
            let dpx = (1.0 - fy) * (c10 - c00) + fy * (c11 - c01);
            let dpy = if y_clamped {
                0.0
            } else {
                (1.0 - fx) * (c01 - c00) + fx * (c11 - c10)
            };
            jac[c] = du * (dpx * w) + dv * (dpy * h);
        }
        (Rgb(color), jac)
    }

    /// Loads PFM (linear HDR) or PNG (display-referred, gamma-decoded) by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        let image = if is_png {
            Image::load_png_linear(path)?
        } else {
            Image::load_pfm(path)?
        };
        Self::new(image)
    }

    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::new(Image::load_pfm(path)?)
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        self.image.save_pfm(path)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        self.image.save_png(path)
    }
}

/// Procedural maps for synthetic scenes and tests.
pub mod presets {
    use super::*;

    /// Names accepted by [`by_name`].
    pub const NAMES: &[&str] = &["sky", "studio", "checker", "gradient", "constant"];

    /// Smooth outdoor-like map: horizon gradient, warm sun lobe, tinted ground.
    /// Color varies monotonically along several axes, which keeps refracted
    /// appearance informative about the exit direction.
    pub fn sky(d: V) -> Rgb {
        let up = d.y;
        let az = d.x.atan2(-d.z);
        let zenith = Rgb::new(0.18, 0.32, 0.85);
        let horizon = Rgb::new(0.85, 0.75, 0.55);
        let ground = Rgb::new(0.35, 0.22, 0.12);
        let base = if up >= 0.0 {
            lerp(horizon, zenith, up.powf(0.6))
        } else {
            lerp(horizon, ground, (-up).powf(0.5))
        };
        let sun_dir = V::new(0.55, 0.55, -0.63).normalize();
        let sun = (d.dot(sun_dir) - 1.0).exp().powi(6) * 1.5;
        let band = 0.12 * (0.5 + 0.5 * az.cos()) + 0.08 * (0.5 + 0.5 * (d.x * 2.0).sin());
        Rgb::new(
            base[0] + 0.9 * sun + band,
            base[1] + 0.7 * sun + 0.5 * band,
            base[2] + 0.3 * sun,
        )
    }

    /// Indoor-like map with a few soft area lights on a dim gradient.
    pub fn studio(d: V) -> Rgb {
        let mut c = lerp(Rgb::new(0.08, 0.1, 0.12), Rgb::new(0.35, 0.3, 0.28), 0.5 + 0.5 * d.y);
        let lights = [
            (V::new(0.0, 0.8, 0.6), Rgb::new(1.6, 1.5, 1.3)),
            (V::new(-0.8, 0.3, -0.5), Rgb::new(0.4, 0.6, 1.4)),
            (V::new(0.9, 0.1, -0.3), Rgb::new(1.2, 0.5, 0.3)),
        ];
        for (dir, col) in lights {
            let w = ((d.dot(dir.normalize()) - 1.0) * 8.0).exp();
            c = c + col.scale(w);
        }
        c
    }

    /// Each channel increases linearly along one axis, so radiance identifies
    /// the direction uniquely.
    pub fn gradient(d: V) -> Rgb {
        Rgb::new(0.5 + 0.4 * d.x, 0.5 + 0.4 * d.y, 0.5 + 0.4 * d.z)
    }

    /// High-contrast checkerboard in latitude/longitude.
    pub fn checker(d: V) -> Rgb {
        let (u, v) = dir_to_uv(d);
        let cell = ((u * 16.0).floor() as i64 + (v * 8.0).floor() as i64).rem_euclid(2);
        if cell == 0 {
            Rgb::new(0.9, 0.85, 0.8)
        } else {
            Rgb::new(0.1, 0.15, 0.3)
        }
    }

    pub fn by_name(name: &str, width: usize, height: usize) -> Option<Result<EnvironmentMap, ImageError>> {
        let f: fn(V) -> Rgb = match name {
            "sky" => sky,
            "studio" => studio,
            "checker" => checker,
            "gradient" => gradient,
            "constant" => |_| Rgb::splat(0.5),
            _ => return None,
        };
        Some(EnvironmentMap::from_fn(width, height, f))
    }

    fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
        Rgb(std::array::from_fn(|c| a.0[c] + (b.0[c] - a.0[c]) * t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> EnvironmentMap {
        let img = Image::from_raw(
            2,
            2,
            vec![
                1.0, 0.0, 0.0, /**/ 0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, /**/ 1.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        EnvironmentMap::new(img).unwrap()
    }

    #[test]
    fn uv_convention() {
        let (_, v) = dir_to_uv(V::new(0.0, 1.0, 0.0));
        assert_eq!(v, 0.0);
        let (_, v) = dir_to_uv(V::new(0.0, -1.0, 0.0));
        assert_eq!(v, 1.0);
        assert_eq!(dir_to_uv(V::new(0.0, 0.0, -1.0)), (0.5, 0.5));
        for &(u, v) in &[(0.1, 0.3), (0.75, 0.9), (0.5, 0.5), (0.01, 0.02)] {
            let (u2, v2) = dir_to_uv(uv_to_dir(u, v));
            assert!((u - u2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_samples_constant() {
        let env = EnvironmentMap::constant(8, 4, Rgb::new(0.3, 0.6, 0.9)).unwrap();
        for d in [
            V::new(0.0, 1.0, 0.0),
            V::new(0.3, -0.2, 0.9).normalize(),
            V::new(-1.0, 0.0, 0.0),
        ] {
            let c = env.sample(d);
            for ch in 0..3 {
                assert!((c[ch] - [0.3, 0.6, 0.9][ch]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn bilinear_blend_at_center_of_two_by_two() {
        // (u, v) = (0.5, 0.5) -> (px, py) = (0.5, 0.5): equal weights on all four texels
        let env = two_by_two();
        let c = env.sample(V::new(0.0, 0.0, -1.0));
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!((c[1] - 0.5).abs() < 1e-12);
        assert!((c[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zenith_blends_top_row_only() {
        // v = 0 clamps to row 0. At the pole u is 0 or 0.5 depending on the
        // sign of zero; on a 2-wide map both give equal horizontal weights.
        let env = two_by_two();
        let c = env.sample(V::new(0.0, 1.0, 0.0));
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12 && c[2].abs() < 1e-12);
    }

    #[test]
    fn seam_is_continuous() {
        let env = EnvironmentMap::from_fn(16, 8, presets::sky).unwrap();
        let eps = 1e-9;
        let a = env.sample_uv(1.0 - eps, 0.4);
        let b = env.sample_uv(eps, 0.4);
        for ch in 0..3 {
            assert!((a[ch] - b[ch]).abs() < 1e-6);
        }
        let left = env.sample(uv_to_dir(1.0 - 1e-9, 0.3));
        let right = env.sample(uv_to_dir(1e-9, 0.3));
        for ch in 0..3 {
            assert!((left[ch] - right[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_about_zenith_is_invariant_for_latitude_only_maps() {
        let env = EnvironmentMap::from_fn(32, 16, |d| Rgb::splat(0.5 + 0.4 * d.y)).unwrap();
        let d = V::new(0.3, 0.5, -0.4).normalize();
        let base = env.sample(d);
        for k in 0..12 {
            let a = k as f64 * std::f64::consts::FRAC_PI_6 + 0.1;
            let r = V::new(d.x * a.cos() + d.z * a.sin(), d.y, -d.x * a.sin() + d.z * a.cos());
            let c = env.sample(r);
            assert!((c[0] - base[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let env = EnvironmentMap::from_fn(64, 32, presets::sky).unwrap();
        let h = 1e-7;
        for d in [V::new(0.3, 0.2, -0.9), V::new(-0.5, -0.3, 0.6), V::new(0.7, 0.6, 0.1)] {
            let d = d.normalize();
            let (_, jac) = env.sample_with_grad(d);
            for axis in 0..3 {
                let mut e = [0.0; 3];
                e[axis] = h;
                let dp = V::from_array(e);
                let fd_plus = sample_unnormalized(&env, d + dp);
                let fd_minus = sample_unnormalized(&env, d - dp);
                for c in 0..3 {
                    let fd = (fd_plus[c] - fd_minus[c]) / (2.0 * h);
                    assert!(
                        (jac[c][axis] - fd).abs() < 1e-4 * (1.0 + fd.abs()),
                        "{} vs {}",
                        jac[c][axis],
                        fd
                    );
                }
            }
        }
    }

    fn sample_unnormalized(env: &EnvironmentMap, d: V) -> Rgb {
        env.sample_uv(
            (0.5 + d.x.atan2(-d.z) / (2.0 * PI)).rem_euclid(1.0),
            d.y.clamp(-1.0, 1.0).acos() / PI,
        )
    }

    #[test]
    fn rejects_invalid_maps() {
        assert!(EnvironmentMap::new(Image::new(1, 4)).is_err());
        let neg = Image::from_raw(2, 2, vec![-1.0; 12]).unwrap();
        assert!(EnvironmentMap::new(neg).is_err());
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let env = EnvironmentMap::from_fn(16, 8, presets::studio).unwrap();
        let p = dir.path().join("env.pfm");
        env.save_pfm(&p).unwrap();
        assert_eq!(EnvironmentMap::load(&p).unwrap(), env);
    }
}
