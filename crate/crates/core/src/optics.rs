//! Closed-form reflection, refraction and Fresnel math for smooth dielectrics.
//!
//! Convention used throughout: `omega_i` points away from the surface, back
//! toward where the ray came from (`omega_i = -ray.direction`), and `n` is the
//! unit normal on the incident side, so `omega_i . n >= 0` for a front-facing
//! hit. Refracted directions returned here are travel directions pointing into
//! the transmitting medium (`omega_t . n <= 0`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Rgb, Vec3};
use crate::scalar::Real;

/// Index of refraction of air.
pub const IOR_AIR: f64 = 1.00028;

/// Incident and transmitting indices of refraction for one interface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IorPair<T = f64> {
    pub eta_i: T,
    pub eta_t: T,
}

impl<T: Real> IorPair<T> {
    pub fn new(eta_i: T, eta_t: T) -> Self {
        debug_assert!(eta_i > T::zero() && eta_t > T::zero());
        Self { eta_i, eta_t }
    }

    /// The same interface crossed in the opposite direction.
    pub fn swapped(self) -> Self {
        Self::new(self.eta_t, self.eta_i)
    }

    /// `eta_i / eta_t`.
    #[inline]
    pub fn ratio(self) -> T {
        self.eta_i / self.eta_t
    }

    /// Radiance compression factor `eta_i^2 / eta_t^2` applied to transmitted light.
    #[inline]
    pub fn compression(self) -> T {
        let r = self.ratio();
        r * r
    }
}

/// No transmitted direction exists: `(eta_i/eta_t)^2 (1 - cos^2) > 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("total internal reflection")]
pub struct TotalInternalReflection;

/// Unpolarized Fresnel energy split; `f_r + f_t == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FresnelSplit<T = f64> {
    pub f_r: T,
    pub f_t: T,
}

impl<T: Real> FresnelSplit<T> {
    fn from_reflectance(f_r: T) -> Self {
        Self {
            f_r,
            f_t: T::one() - f_r,
        }
    }

    /// All energy reflected.
    pub fn mirror() -> Self {
        Self::from_reflectance(T::one())
    }
}

#[inline]
fn debug_check_unit<T: Real>(v: Vec3<T>) {
    debug_assert!(
        (v.norm() - T::one()).abs() <= T::lit(1e-6),
        "expected unit vector, got norm {}",
        v.norm()
    );
}

/// Mirror reflection `2 (n . w) n - w`.
#[inline]
pub fn reflect<T: Real>(omega_i: Vec3<T>, n: Vec3<T>) -> Vec3<T> {
    debug_check_unit(omega_i);
    debug_check_unit(n);
    n * (T::lit(2.0) * n.dot(omega_i)) - omega_i
}

/// Pulls a cotangent on the reflected direction back onto the normal.
#[inline]
pub fn reflect_normal_vjp<T: Real>(omega_i: Vec3<T>, n: Vec3<T>, grad_out: Vec3<T>) -> Vec3<T> {
    let two = T::lit(2.0);
    omega_i * (two * grad_out.dot(n)) + grad_out * (two * n.dot(omega_i))
}

/// Pullback of a cotangent on the refracted direction onto the normal.
/// Returns zero under total internal reflection.
pub fn refract_normal_vjp<T: Real>(omega_i: Vec3<T>, n: Vec3<T>, ior: IorPair<T>, grad_out: Vec3<T>) -> Vec3<T> {
    let eta = ior.ratio();
    let c = omega_i.dot(n);
    let radicand = T::one() - eta * eta * (T::one() - c * c);
    if radicand <= T::zero() {
        return Vec3::zero();
    }
    let root = radicand.sqrt();
    grad_out * (eta * c - root) + omega_i * ((eta - eta * eta * c / root) * n.dot(grad_out))
}

/// Snell refraction of `omega_i` through the interface with normal `n`.
pub fn refract<T: Real>(omega_i: Vec3<T>, n: Vec3<T>, ior: IorPair<T>) -> Result<Vec3<T>, TotalInternalReflection> {
    debug_check_unit(omega_i);
    debug_check_unit(n);
    let eta = ior.ratio();
    let cos_i = omega_i.dot(n);
    let radicand = T::one() - eta * eta * (T::one() - cos_i * cos_i);
    if radicand < T::zero() {
        return Err(TotalInternalReflection);
    }
    let tangential = omega_i - n * cos_i;
    Ok(-(tangential * eta) - n * radicand.sqrt())
}

/// Transmitted cosine via Snell's law, clamping rounding noise on `cos_i`.
#[inline]
fn cos_transmitted<T: Real>(cos_i: T, ior: IorPair<T>) -> Result<T, TotalInternalReflection> {
    let eta = ior.ratio();
    let sin2_i = (T::one() - cos_i * cos_i).max(T::zero());
    let sin2_t = eta * eta * sin2_i;
    if sin2_t > T::one() {
        return Err(TotalInternalReflection);
    }
    Ok((T::one() - sin2_t).sqrt())
}

/// Unpolarized Fresnel reflectance of a smooth dielectric interface.
pub fn fresnel_reflectance<T: Real>(
    cos_beta_i: T,
    ior: IorPair<T>,
) -> Result<FresnelSplit<T>, TotalInternalReflection> {
    let cos_i = cos_beta_i.min(T::one());
    let cos_t = cos_transmitted(cos_i, ior)?;
    let (ei, et) = (ior.eta_i, ior.eta_t);
    let r_par = (et * cos_i - ei * cos_t) / (et * cos_i + ei * cos_t);
    let r_perp = (ei * cos_i - et * cos_t) / (ei * cos_i + et * cos_t);
    let f_r = (T::lit(0.5) * (r_par * r_par + r_perp * r_perp)).min(T::one());
    Ok(FresnelSplit::from_reflectance(f_r))
}

/// Fresnel reflectance plus its partial derivatives
/// `(F_r, dF_r/dcos_i, dF_r/deta_t)`.
pub fn fresnel_reflectance_grad<T: Real>(cos_beta_i: T, ior: IorPair<T>) -> Result<(T, T, T), TotalInternalReflection> {
    let ci = cos_beta_i.min(T::one());
    let ct = cos_transmitted(ci, ior)?;
    let (ei, et) = (ior.eta_i, ior.eta_t);
    let two = T::lit(2.0);
    // d cos_t / d cos_i and d cos_t / d eta_t
    let safe_ct = ct.max(T::lit(1e-12));
    let dct_dci = ei * ei / (et * et) * ci / safe_ct;
    let dct_det = ei * ei * (T::one() - ci * ci) / (et * et * et) / safe_ct;

    let (a, b) = (et * ci, ei * ct);
    let r_par = (a - b) / (a + b);
    let (c, d) = (ei * ci, et * ct);
    let r_perp = (c - d) / (c + d);

    let dpar = |da: T, db: T| two * (b * da - a * db) / ((a + b) * (a + b));
    let dperp = |dc: T, dd: T| two * (d * dc - c * dd) / ((c + d) * (c + d));

    let dpar_dci = dpar(et, ei * dct_dci);
    let dperp_dci = dperp(ei, et * dct_dci);
    let dpar_det = dpar(ci, ei * dct_det);
    let dperp_det = dperp(T::zero(), ct + et * dct_det);

    let f_r = T::lit(0.5) * (r_par * r_par + r_perp * r_perp);
    let df_dci = r_par * dpar_dci + r_perp * dperp_dci;
    let df_det = r_par * dpar_det + r_perp * dperp_det;
    Ok((f_r, df_dci, df_det))
}

/// Two-term composite `F_r E_r + (eta_i^2/eta_t^2)(1 - F_r) E_t`.
pub fn blend_radiance(f_r: f64, ior: IorPair<f64>, e_reflect: Rgb, e_transmit: Rgb) -> Rgb {
    let k = ior.compression() * (1.0 - f_r);
    Rgb(std::array::from_fn(|c| f_r * e_reflect.0[c] + k * e_transmit.0[c]))
}
