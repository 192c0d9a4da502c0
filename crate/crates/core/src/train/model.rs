//! The learned forward model: geometry plus ray-bending network, rendered
//! with the two-term Fresnel composite.

use crate::envmap::EnvironmentMap;
use crate::error::CheckpointError;
use crate::image::{Image, Mask};
use crate::math::{Ray, Rgb, Vec3};
use crate::nn::{
    Adam, AdamConfig, Checkpoint, CheckpointHeader, GeometryRecord, NetworkRecord, NeuralSdf, RayBendingNet, RbnOutput,
};
use crate::optics::{blend_radiance, fresnel_reflectance, reflect, IorPair, IOR_AIR};
use crate::oracle::Camera;
use crate::scalar::Real;
use crate::sdf::{sphere_trace_batch, DistanceField, SdfField, ShapeSpec, SurfaceHit};

type V = Vec3<f64>;

/// Rows per network call when rendering whole images.
const RENDER_CHUNK: usize = 4096;

#[derive(Clone, Debug)]
pub enum Geometry<T> {
    Learned(NeuralSdf<T>),
    Analytic { spec: ShapeSpec, field: SdfField },
}

impl<T: Real> Geometry<T> {
    pub fn analytic(spec: ShapeSpec) -> Result<Self, crate::error::GeometryError> {
        let field = spec.to_field()?;
        Ok(Geometry::Analytic { spec, field })
    }

    pub fn field(&self) -> &dyn DistanceField {
        match self {
            Geometry::Learned(n) => n,
            Geometry::Analytic { field, .. } => field,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Geometry::Learned(_))
    }

    pub fn record(&self) -> GeometryRecord {
        match self {
            Geometry::Learned(n) => GeometryRecord::Learned(*n.config()),
            Geometry::Analytic { spec, .. } => GeometryRecord::Analytic(spec.clone()),
        }
    }

    /// Unit outward normals; zero where the gradient vanishes.
    pub fn normals(&self, points: &[V]) -> Vec<V> {
        let mut g = vec![V::zero(); points.len()];
        self.field().gradient_batch(points, &mut g);
        g.into_iter()
            .map(|v| {
                let len = v.norm();
                if len > 0.0 {
                    v / len
                } else {
                    V::zero()
                }
            })
            .collect()
    }
}

/// Radiance of a hit shaded with a predicted exit direction and index.
pub fn shade_learned(env: &EnvironmentMap, omega_i: V, n: V, out: &RbnOutput, ior_air: f64) -> Rgb {
    let ior = IorPair::new(ior_air, out.eta_t);
    let e_r = env.sample(reflect(omega_i, n));
    let f_r = fresnel_reflectance(omega_i.dot(n).clamp(0.0, 1.0), ior).map_or(1.0, |s| s.f_r);
    blend_radiance(f_r, ior, e_r, env.sample(out.omega_t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayResult {
    pub hit: bool,
    pub radiance: Rgb,
    /// Network outputs; `None` on misses or a collapsed direction head.
    pub output: Option<RbnOutput>,
}

/// A rendered view with per-pixel network outputs (row-major, `None` on misses).
#[derive(Clone, Debug)]
pub struct ViewPrediction {
    pub image: Image,
    pub mask: Mask,
    pub omega_t: Vec<Option<V>>,
    pub eta_t: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub geometry: Geometry<T>,
    pub rbn: RayBendingNet<T>,
    pub ior_air: f64,
}

impl<T: Real> Model<T> {
    pub fn new(geometry: Geometry<T>, rbn: RayBendingNet<T>) -> Self {
        Self {
            geometry,
            rbn,
            ior_air: IOR_AIR,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let rbn = ckpt.load_rbn()?;
        let geometry = match (&ckpt.header.geometry, ckpt.load_sdf()?) {
            (_, Some(sdf)) => Geometry::Learned(sdf),
            (GeometryRecord::Analytic(spec), None) => {
                Geometry::analytic(spec.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))?
            }
            (GeometryRecord::Learned(_), None) => unreachable!("load_sdf checks the record"),
        };
        Ok(Self::new(geometry, rbn))
    }

    pub fn to_checkpoint(
        &self,
        step: u64,
        adam: AdamConfig,
        sdf_adam: Option<&Adam<T>>,
        rbn_adam: Option<&Adam<T>>,
    ) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                step,
                geometry: self.geometry.record(),
                rbn: *self.rbn.config(),
                adam,
            },
            sdf: match &self.geometry {
                Geometry::Learned(n) => Some(NetworkRecord::capture(&n.net, sdf_adam)),
                Geometry::Analytic { .. } => None,
            },
            rbn: NetworkRecord::capture(&self.rbn.net, rbn_adam),
        }
    }

    pub fn trace(&self, rays: &[Ray<f64>]) -> Vec<SurfaceHit> {
        sphere_trace_batch(self.geometry.field(), rays)
    }

    /// Renders `rays` under `env`.
    pub fn render_rays(&self, rays: &[Ray<f64>], env: &EnvironmentMap) -> Vec<RayResult> {
        let hits = self.trace(rays);
        let mut out: Vec<RayResult> = hits
            .iter()
            .map(|h| RayResult {
                hit: h.hit,
                radiance: Rgb::BLACK,
                output: None,
            })
            .collect();
        let idx: Vec<usize> = (0..rays.len()).filter(|&i| hits[i].hit).collect();
        for chunk in idx.chunks(RENDER_CHUNK) {
            let x: Vec<V> = chunk.iter().map(|&i| hits[i].x).collect();
            let n = self.geometry.normals(&x);
            let w: Vec<V> = chunk.iter().map(|&i| -rays[i].direction).collect();
            let preds = self.rbn.eval_batch(&w, &x, &n);
            for (k, &i) in chunk.iter().enumerate() {
                let r = &mut out[i];
                match preds[k] {
                    Ok(p) => {
                        r.radiance = shade_learned(env, w[k], n[k], &p, self.ior_air);
                        r.output = Some(p);
                    }
                    // collapsed direction head: reflection only
                    Err(_) => r.radiance = env.sample(reflect(w[k], n[k])),
                }
            }
        }
        out
    }

    pub fn render_view(&self, camera: &Camera, env: &EnvironmentMap) -> ViewPrediction {
        let res = self.render_rays(&camera.rays(), env);
        let w = camera.width;
        ViewPrediction {
            image: Image::from_fn(w, camera.height, |x, y| res[y * w + x].radiance),
            mask: Mask::from_fn(w, camera.height, |x, y| res[y * w + x].hit),
            omega_t: res.iter().map(|r| r.output.map(|p| p.omega_t)).collect(),
            eta_t: res.iter().map(|r| r.output.map(|p| p.eta_t)).collect(),
        }
    }
}
