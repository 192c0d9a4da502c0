//! The five loss terms, their gradients, and the weighting schedules.
//!
//! Every term returns its value together with the cotangent of the value
//! with respect to its direct inputs.

use serde::{Deserialize, Serialize};

use crate::math::{Rgb, Vec3};
use crate::scalar::{sigmoid, softplus};

type V = Vec3<f64>;

/// Guard on the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pix: f64,
    pub eik: f64,
    pub sil: f64,
    pub rg_init: f64,
    pub rg_floor: f64,
    /// Decay horizon in steps; a quarter of the iterations when unset.
    pub rg_tau: Option<f64>,
    pub rs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pix: 1.0,
            eik: 0.1,
            sil: 100.0,
            rg_init: 1.0,
            rg_floor: 0.01,
            rg_tau: None,
            rs: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.pix, self.eik, self.sil, self.rg_init, self.rg_floor, self.rs];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err("loss weights must be finite and nonnegative".into());
        }
        if self.rg_floor > self.rg_init {
            return Err("rg_floor exceeds rg_init".into());
        }
        if matches!(self.rg_tau, Some(t) if !(t > 0.0)) {
            return Err("rg_tau must be positive".into());
        }
        Ok(())
    }

    /// `max(floor, init * exp(-step / tau))`.
    pub fn lambda_rg(&self, step: usize, iterations: usize) -> f64 {
        let tau = self.rg_tau.unwrap_or((iterations as f64 / 4.0).max(1.0));
        (self.rg_init * (-(step as f64) / tau).exp()).max(self.rg_floor)
    }
}

/// Silhouette sharpness: `alpha_init`, doubled at each quarter of training.
pub fn alpha_schedule(alpha_init: f64, step: usize, iterations: usize) -> f64 {
    let quarter = (4 * step).checked_div(iterations).map_or(0, |q| q.min(3));
    alpha_init * (1u32 << quarter) as f64
}

/// Per-term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub pix: f64,
    pub sil: f64,
    pub eik: f64,
    pub rg: f64,
    pub rs: f64,
}

impl LossComponents {
    /// First non-finite component, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("pix", self.pix),
            ("sil", self.sil),
            ("eik", self.eik),
            ("rg", self.rg),
            ("rs", self.rs),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights, step: usize, iterations: usize) -> f64 {
    w.pix * c.pix + w.eik * c.eik + w.sil * c.sil + w.lambda_rg(step, iterations) * c.rg + w.rs * c.rs
}

/// Mean L1 color error over the hit set. `None` when the set is empty.
pub fn loss_pix(rendered: &[Rgb], target: &[Rgb]) -> Option<(f64, Vec<Rgb>)> {
    assert_eq!(rendered.len(), target.len());
    if rendered.is_empty() {
        return None;
    }
    let inv = 1.0 / rendered.len() as f64;
    let mut sum = 0.0;
    let grads = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            Rgb(std::array::from_fn(|c| {
                let d = r[c] - t[c];
                sum += d.abs();
                d.signum() * inv * (d != 0.0) as u8 as f64
            }))
        })
        .collect();
    Some((sum * inv, grads))
}

/// Mean `1 - cos(omega_t, omega_a)` with a guarded denominator.
pub fn loss_rg(omega_t: &[V], omega_a: &[V]) -> (f64, Vec<V>) {
    assert_eq!(omega_t.len(), omega_a.len());
    if omega_t.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / omega_t.len() as f64;
    let mut sum = 0.0;
    let grads = omega_t
        .iter()
        .zip(omega_a)
        .map(|(&t, &a)| {
            let (nt, na) = (t.norm(), a.norm());
            let denom = nt * na;
            let dot = t.dot(a);
            if denom > COSINE_EPS {
                sum += 1.0 - dot / denom;
                // d/dt of -(t.a)/(|t||a|)
                -(a / denom - t * (dot / (nt * nt * denom))) * inv
            } else {
                sum += 1.0 - dot / COSINE_EPS;
                -(a / COSINE_EPS) * inv
            }
        })
        .collect();
    (sum * inv, grads)
}

/// Mean over patches of the per-coordinate population variance of
/// `omega_t`, averaged over the three coordinates. Each slice in
/// `patches` holds the directions of one all-hit patch.
pub fn loss_rs(patches: &[&[V]]) -> (f64, Vec<Vec<V>>) {
    if patches.is_empty() {
        return (0.0, Vec::new());
    }
    let inv_p = 1.0 / patches.len() as f64;
    let mut sum = 0.0;
    let grads = patches
        .iter()
        .map(|dirs| {
            let n = dirs.len() as f64;
            let mean = dirs.iter().fold(V::zero(), |acc, &d| acc + d) / n;
            let var: f64 = dirs.iter().map(|&d| (d - mean).norm_squared()).sum::<f64>() / n;
            sum += var / 3.0;
            dirs.iter().map(|&d| (d - mean) * (2.0 / (3.0 * n) * inv_p)).collect()
        })
        .collect();
    (sum * inv_p, grads)
}

/// `CE_alpha` for one ray's minimum field value `z`. Rays whose mask is
/// empty are pushed outside (`softplus(-alpha z) / alpha`); rays whose mask
/// is set but that missed the surface are pulled inside
/// (`softplus(alpha z) / alpha`). Returns the value and `d/dz`.
pub fn silhouette_ce(z: f64, alpha: f64, inside_target: bool) -> (f64, f64) {
    if inside_target {
        (softplus(alpha * z) / alpha, sigmoid(alpha * z))
    } else {
        (softplus(-alpha * z) / alpha, -sigmoid(-alpha * z))
    }
}

/// Mean silhouette loss over the miss set. `z[i]` is `None` for rays that
/// do not cross the bounding box; they count toward the mean with zero
/// loss. Returns the value and the cotangent on each `z`.
pub fn loss_sil(z: &[Option<f64>], inside_target: &[bool], alpha: f64) -> (f64, Vec<f64>) {
    assert_eq!(z.len(), inside_target.len());
    if z.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / z.len() as f64;
    let mut sum = 0.0;
    let grads = z
        .iter()
        .zip(inside_target)
        .map(|(zk, &inside)| match zk {
            Some(zk) => {
                let (v, d) = silhouette_ce(*zk, alpha, inside);
                sum += v;
                d * inv
            }
            None => 0.0,
        })
        .collect();
    (sum * inv, grads)
}

/// Mean `(|g| - 1)^2` and the cotangent on each gradient.
pub fn loss_eik(gradients: &[V]) -> (f64, Vec<V>) {
    if gradients.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / gradients.len() as f64;
    let mut sum = 0.0;
    let grads = gradients
        .iter()
        .map(|&g| {
            let len = g.norm();
            let r = len - 1.0;
            sum += r * r;
            if len > 0.0 {
                g * (2.0 * r / len * inv)
            } else {
                V::zero()
            }
        })
        .collect();
    (sum * inv, grads)
}
