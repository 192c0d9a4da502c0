//! Sphere tracing from outside (`sphere_trace`) and inside (`inside_trace`).
//!
//! Both are driven by one per-ray state machine so that learned fields can be
//! marched in lockstep with a single batched network evaluation per step.

use super::DistanceField;
use crate::error::GeometryError;
use crate::math::{Ray, Vec3};

type V = Vec3<f64>;

/// Step budget for the sphere-tracing phase.
pub const MAX_STEPS: usize = 256;
/// Bracketing refinement iterations after a hit.
const REFINE_STEPS: usize = 8;
/// Samples in the fallback sign-change scan after the step budget runs out.
const SCAN_SAMPLES: usize = 512;
/// Forward probes looking for a bracket once the field is below eps.
const MAX_PROBES: usize = 8;
/// Step relaxation for non-metric (learned) fields.
const LEARNED_RELAXATION: f64 = 0.9;

/// Ray/surface intersection record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub hit: bool,
    pub t: f64,
    pub x: V,
    /// Unit outward normal.
    pub n: V,
}

impl SurfaceHit {
    pub fn miss() -> Self {
        Self {
            hit: false,
            t: f64::INFINITY,
            x: V::zero(),
            n: V::zero(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    pub max_steps: usize,
    /// Multiplier on the field value per step.
    pub relaxation: f64,
    pub eps: f64,
}

impl TraceOptions {
    pub fn for_field(field: &dyn DistanceField) -> Self {
        Self {
            max_steps: MAX_STEPS,
            relaxation: if field.is_metric() { 1.0 } else { LEARNED_RELAXATION },
            eps: hit_epsilon(field),
        }
    }
}

/// Hit tolerance `1e-5 * box diagonal`.
pub fn hit_epsilon(field: &dyn DistanceField) -> f64 {
    1e-5 * field.bounds().diagonal()
}

#[derive(Clone, Copy, Debug)]
enum Phase {
    March {
        steps: usize,
    },
    /// Field dropped below eps while still non-negative; step ahead with
    /// growing strides for a sign change while the field keeps decreasing.
    Probe {
        t_pos: f64,
        f_pos: f64,
        dist: f64,
        tries: usize,
    },
    Refine {
        lo: f64,
        f_lo: f64,
        hi: f64,
        f_hi: f64,
        iter: usize,
        side: i8,
    },
    Scan {
        step: f64,
        count: usize,
    },
    Done {
        hit: bool,
    },
}

/// Marches one ray on `sign * f`. `sign = 1` traces from outside, `-1`
/// traces the interior toward the exit.
#[derive(Clone, Copy, Debug)]
struct Marcher {
    ray: Ray<f64>,
    sign: f64,
    t: f64,
    t_far: f64,
    prev: Option<(f64, f64)>,
    best: (f64, f64),
    phase: Phase,
    opts: TraceOptions,
    diag: f64,
}

impl Marcher {
    fn new(ray: Ray<f64>, sign: f64, t_near: f64, t_far: f64, opts: TraceOptions, diag: f64) -> Self {
        Self {
            ray,
            sign,
            t: t_near,
            t_far,
            prev: None,
            best: (t_near, f64::INFINITY),
            phase: Phase::March { steps: 0 },
            opts,
            diag,
        }
    }

    fn finished(&self) -> Option<bool> {
        match self.phase {
            Phase::Done { hit } => Some(hit),
            _ => None,
        }
    }

    fn query_point(&self) -> V {
        self.ray.at(self.t)
    }

    fn start_refine(&mut self, lo: f64, f_lo: f64, hi: f64, f_hi: f64) {
        self.phase = Phase::Refine {
            lo,
            f_lo,
            hi,
            f_hi,
            iter: 0,
            side: 0,
        };
        self.t = Self::secant(lo, f_lo, hi, f_hi);
    }

    fn secant(lo: f64, f_lo: f64, hi: f64, f_hi: f64) -> f64 {
        let w = hi - lo;
        let s = lo + w * f_lo / (f_lo - f_hi);
        // keep the secant point away from the bracket ends so the bracket shrinks
        s.clamp(lo + 0.05 * w, hi - 0.05 * w)
    }

    fn start_scan(&mut self) {
        let span = self.t_far - self.t;
        if span <= 0.0 {
            self.phase = Phase::Done { hit: false };
            return;
        }
        let step = span / SCAN_SAMPLES as f64;
        self.phase = Phase::Scan { step, count: 0 };
        self.t += step;
    }

    /// Consumes the field value at the current query point.
    fn advance(&mut self, raw: f64) {
        let f = self.sign * raw;
        if f.abs() < self.best.1.abs() {
            self.best = (self.t, f);
        }
        match self.phase {
            Phase::March { steps } => {
                if f < self.opts.eps {
                    if f < 0.0 {
                        match self.prev {
                            Some((tp, fp)) => self.start_refine(tp, fp, self.t, f),
                            None => self.phase = Phase::Done { hit: true },
                        }
                    } else {
                        // distance to the root predicted from the last decrease rate
                        let predicted = match self.prev {
                            Some((tp, fp)) if fp > f => 1.5 * f * (self.t - tp) / (fp - f),
                            _ => {
                                // not approaching the surface (or no history yet):
                                // creep forward and look again
                                self.prev = Some((self.t, f));
                                self.t += (self.opts.relaxation * f).max(self.opts.eps);
                                self.phase = if self.t > self.t_far || steps + 1 >= self.opts.max_steps {
                                    Phase::Done { hit: false }
                                } else {
                                    Phase::March { steps: steps + 1 }
                                };
                                return;
                            }
                        };
                        let dist = predicted.max(2.0 * self.opts.eps);
                        self.phase = Phase::Probe {
                            t_pos: self.t,
                            f_pos: f,
                            dist,
                            tries: 0,
                        };
                        self.t += dist;
                    }
                    return;
                }
                if steps + 1 >= self.opts.max_steps {
                    self.prev = Some((self.t, f));
                    self.start_scan();
                    return;
                }
                self.prev = Some((self.t, f));
                let step = (self.opts.relaxation * f).min(self.diag);
                self.t += step;
                if self.t > self.t_far {
                    self.phase = Phase::Done { hit: false };
                } else {
                    self.phase = Phase::March { steps: steps + 1 };
                }
            }
            Phase::Probe {
                t_pos,
                f_pos,
                dist,
                tries,
            } => {
                if f < 0.0 {
                    self.start_refine(t_pos, f_pos, self.t, f);
                } else if f < f_pos && tries + 1 < MAX_PROBES && self.t + 2.0 * dist <= self.t_far {
                    self.phase = Phase::Probe {
                        t_pos: self.t,
                        f_pos: f,
                        dist: 2.0 * dist,
                        tries: tries + 1,
                    };
                    self.t += 2.0 * dist;
                } else {
                    self.t = t_pos;
                    self.best = (t_pos, f_pos);
                    self.phase = Phase::Done { hit: true };
                }
            }
            Phase::Refine {
                lo,
                f_lo,
                hi,
                f_hi,
                iter,
                side,
            } => {
                // Illinois variant of regula falsi
                let (mut lo, mut f_lo, mut hi, mut f_hi, mut side) = (lo, f_lo, hi, f_hi, side);
                if f >= 0.0 {
                    lo = self.t;
                    f_lo = f;
                    if side == 1 {
                        f_hi *= 0.5;
                    }
                    side = 1;
                } else {
                    hi = self.t;
                    f_hi = f;
                    if side == -1 {
                        f_lo *= 0.5;
                    }
                    side = -1;
                }
                if iter + 1 >= REFINE_STEPS || f == 0.0 {
                    self.t = self.best.0;
                    self.phase = Phase::Done { hit: true };
                } else {
                    self.phase = Phase::Refine {
                        lo,
                        f_lo,
                        hi,
                        f_hi,
                        iter: iter + 1,
                        side,
                    };
                    self.t = Self::secant(lo, f_lo, hi, f_hi);
                }
            }
            Phase::Scan { step, count } => {
                if f < 0.0 {
                    let (tp, fp) = self.prev.unwrap_or((self.t - step, f.abs()));
                    self.start_refine(tp, fp, self.t, f);
                    return;
                }
                self.prev = Some((self.t, f));
                if count + 1 >= SCAN_SAMPLES || self.t + step > self.t_far {
                    self.phase = Phase::Done { hit: false };
                } else {
                    self.t += step;
                    self.phase = Phase::Scan { step, count: count + 1 };
                }
            }
            Phase::Done { .. } => {}
        }
    }
}

fn finish(field: &dyn DistanceField, m: &Marcher) -> SurfaceHit {
    match m.finished() {
        Some(true) => {
            let x = m.ray.at(m.t);
            let g = field.gradient(x);
            let len = g.norm();
            SurfaceHit {
                hit: true,
                t: m.t,
                x,
                n: if len > 0.0 { g / len } else { V::zero() },
            }
        }
        _ => SurfaceHit::miss(),
    }
}

fn run(field: &dyn DistanceField, mut m: Marcher) -> Marcher {
    while m.finished().is_none() {
        let p = m.query_point();
        m.advance(field.distance(p));
    }
    m
}

/// First intersection of `ray` with the zero-level set, starting where the
/// ray enters the bounding box.
pub fn sphere_trace(field: &dyn DistanceField, ray: &Ray<f64>) -> SurfaceHit {
    let bounds = field.bounds();
    let Some((t_near, t_far)) = bounds.clip(ray) else {
        return SurfaceHit::miss();
    };
    let opts = TraceOptions::for_field(field);
    let m = run(field, Marcher::new(*ray, 1.0, t_near, t_far, opts, bounds.diagonal()));
    finish(field, &m)
}

/// Traces many rays in lockstep; each step issues one batched field query
/// over the rays still in flight. Results match [`sphere_trace`].
pub fn sphere_trace_batch(field: &dyn DistanceField, rays: &[Ray<f64>]) -> Vec<SurfaceHit> {
    let bounds = field.bounds();
    let opts = TraceOptions::for_field(field);
    let diag = bounds.diagonal();
    let mut marchers: Vec<Option<Marcher>> = rays
        .iter()
        .map(|r| bounds.clip(r).map(|(t0, t1)| Marcher::new(*r, 1.0, t0, t1, opts, diag)))
        .collect();
    let mut active: Vec<usize> = (0..rays.len()).filter(|&i| marchers[i].is_some()).collect();
    let mut points = Vec::with_capacity(active.len());
    let mut values = Vec::with_capacity(active.len());
    while !active.is_empty() {
        points.clear();
        points.extend(active.iter().map(|&i| marchers[i].as_ref().unwrap().query_point()));
        values.clear();
        values.resize(points.len(), 0.0);
        field.distance_batch(&points, &mut values);
        for (&i, &v) in active.iter().zip(values.iter()) {
            marchers[i].as_mut().unwrap().advance(v);
        }
        active.retain(|&i| marchers[i].as_ref().unwrap().finished().is_none());
    }

    let hit_idx: Vec<usize> = (0..rays.len())
        .filter(|&i| marchers[i].as_ref().and_then(|m| m.finished()) == Some(true))
        .collect();
    let hit_pts: Vec<V> = hit_idx
        .iter()
        .map(|&i| {
            let m = marchers[i].as_ref().unwrap();
            m.ray.at(m.t)
        })
        .collect();
    let mut grads = vec![V::zero(); hit_pts.len()];
    field.gradient_batch(&hit_pts, &mut grads);
    let mut out = vec![SurfaceHit::miss(); rays.len()];
    for ((&i, &x), &g) in hit_idx.iter().zip(hit_pts.iter()).zip(grads.iter()) {
        let len = g.norm();
        out[i] = SurfaceHit {
            hit: true,
            t: marchers[i].as_ref().unwrap().t,
            x,
            n: if len > 0.0 { g / len } else { V::zero() },
        };
    }
    out
}

/// Exit point of a ray that starts on or inside the surface. Marches on
/// `-f` after a `2 eps` offset; the returned normal is outward.
pub fn inside_trace(field: &dyn DistanceField, ray: &Ray<f64>) -> Result<SurfaceHit, GeometryError> {
    let bounds = field.bounds();
    let opts = TraceOptions::for_field(field);
    let t_start = 2.0 * opts.eps;
    let t_far = match bounds.clip(ray) {
        Some((_, t1)) => t1.max(t_start),
        None => t_start,
    };
    let m = run(
        field,
        Marcher::new(*ray, -1.0, t_start, t_far + opts.eps, opts, bounds.diagonal()),
    );
    let hit = finish(field, &m);
    if hit.hit {
        Ok(hit)
    } else {
        Err(GeometryError::NoExit)
    }
}
