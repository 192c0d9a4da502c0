//! Loss evaluation with exact gradients, and the optimization loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{sample_batch, TrainBatch};
use super::config::TrainConfig;
use super::losses::{alpha_schedule, loss_eik, loss_pix, loss_rg, loss_rs, loss_sil, LossComponents, LossWeights};
use super::model::{Geometry, Model};
use crate::envmap::EnvironmentMap;
use crate::error::TrainError;
use crate::math::{Rgb, Vec3};
use crate::nn::{Adam, AdamConfig, NeuralSdf, RayBendingNet};
use crate::optics::{fresnel_reflectance_grad, reflect, reflect_normal_vjp, refract_normal_vjp, IorPair};
use crate::oracle::{guidance_direction, Dataset, Split, View};
use crate::scalar::Real;

type V = Vec3<f64>;

/// Smallest `|g . d|` for which the hit point is moved by implicit
/// differentiation; grazing hits are held fixed.
const GRAZING_GUARD: f64 = 1e-6;

/// Everything a loss evaluation needs besides the model and the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub env: &'a EnvironmentMap,
    pub weights: &'a LossWeights,
    pub lambda_rg: f64,
    pub alpha: f64,
    /// Index used for the guidance direction.
    pub ior_dataset: f64,
    pub sil_samples: usize,
    /// Accumulate SDF parameter gradients (learned geometry only).
    pub train_geometry: bool,
    pub detach_rbn_geometry: bool,
}

/// Loss values and parameter gradients of the weighted total.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub components: LossComponents,
    pub total: f64,
    pub sdf_grads: Option<Vec<T>>,
    pub rbn_grads: Vec<T>,
    pub hit_count: usize,
    pub miss_count: usize,
}

pub fn weighted_total(c: &LossComponents, w: &LossWeights, lambda_rg: f64) -> f64 {
    w.pix * c.pix + w.eik * c.eik + w.sil * c.sil + lambda_rg * c.rg + w.rs * c.rs
}

/// Forward partials of one shaded hit.
struct Shading {
    color: Rgb,
    f_r: f64,
    df_dcos: f64,
    df_deta: f64,
    cos_active: bool,
    k: f64,
    e_r: Rgb,
    e_t: Rgb,
    j_r: [V; 3],
    j_t: [V; 3],
}

fn shade_with_partials(env: &EnvironmentMap, w: V, n: V, omega_t: V, eta_t: f64, ior_air: f64) -> Shading {
    let ior = IorPair::new(ior_air, eta_t);
    let cos = w.dot(n);
    let cos_c = cos.clamp(0.0, 1.0);
    let (f_r, df_dcos, df_deta) = fresnel_reflectance_grad(cos_c, ior).unwrap_or((1.0, 0.0, 0.0));
    let (e_r, j_r) = env.sample_with_grad(reflect(w, n));
    let (e_t, j_t) = env.sample_with_grad(omega_t);
    let k = ior.compression();
    let color = Rgb(std::array::from_fn(|c| f_r * e_r[c] + k * (1.0 - f_r) * e_t[c]));
    Shading {
        color,
        f_r,
        df_dcos,
        df_deta,
        cos_active: cos > 0.0 && cos < 1.0,
        k,
        e_r,
        e_t,
        j_r,
        j_t,
    }
}

fn to_t<T: Real>(v: &[V]) -> Vec<T> {
    v.iter().flat_map(|p| [T::lit(p.x), T::lit(p.y), T::lit(p.z)]).collect()
}

fn from_t<T: Real>(v: &[T]) -> Vec<V> {
    v.chunks_exact(3)
        .map(|c| V::new(c[0].to_f64_lossy(), c[1].to_f64_lossy(), c[2].to_f64_lossy()))
        .collect()
}

impl<T: Real> Model<T> {
    /// Weighted total loss on a traced batch plus its gradient with respect
    /// to both networks. `eik_points` are the eikonal samples.
    pub fn loss_and_grads(&self, batch: &TrainBatch, eik_points: &[V], ctx: &LossContext) -> Evaluation<T> {
        let w8 = ctx.weights;
        let sdf: Option<&NeuralSdf<T>> = match &self.geometry {
            Geometry::Learned(s) => Some(s),
            Geometry::Analytic { .. } => None,
        };
        let train_geo = ctx.train_geometry && sdf.is_some();
        let mut sdf_grads: Option<Vec<T>> = sdf.filter(|_| train_geo).map(|s| vec![T::zero(); s.net.param_count()]);
        let mut rbn_grads = vec![T::zero(); self.rbn.net.param_count()];
        let mut comps = LossComponents::default();

        let (hit_idx, miss_idx) = batch.partition();
        let nh = hit_idx.len();

        // ---- hit set: geometry, network, shading
        let xs: Vec<V> = hit_idx.iter().map(|&i| batch.hits[i].x).collect();
        let ds: Vec<V> = hit_idx.iter().map(|&i| batch.rays[i].direction).collect();
        let ws: Vec<V> = ds.iter().map(|&d| -d).collect();
        let sdf_ev = sdf.filter(|_| nh > 0).map(|s| s.eval(&xs));
        let gs: Vec<V> = match &sdf_ev {
            Some(ev) => (0..nh).map(|k| ev.gradient(k)).collect(),
            None => {
                let mut g = vec![V::zero(); nh];
                self.geometry.field().gradient_batch(&xs, &mut g);
                g
            }
        };
        let glen: Vec<f64> = gs.iter().map(|g| g.norm()).collect();
        let ns: Vec<V> = gs
            .iter()
            .zip(&glen)
            .map(|(&g, &l)| if l > 0.0 { g / l } else { V::zero() })
            .collect();
        let rbn_ev = self.rbn.eval_tape(&ws, &xs, &ns);
        let valid: Vec<bool> = (0..nh).map(|k| glen[k] > 0.0 && rbn_ev.outputs[k].is_some()).collect();

        let shading: Vec<Option<Shading>> = (0..nh)
            .map(|k| {
                let out = rbn_ev.outputs[k].filter(|_| valid[k])?;
                Some(shade_with_partials(
                    ctx.env,
                    ws[k],
                    ns[k],
                    out.omega_t,
                    out.eta_t,
                    self.ior_air,
                ))
            })
            .collect();
        let rendered: Vec<Rgb> = (0..nh)
            .map(|k| match &shading[k] {
                Some(s) => s.color,
                None if glen[k] > 0.0 => ctx.env.sample(reflect(ws[k], ns[k])),
                None => Rgb::BLACK,
            })
            .collect();
        let targets: Vec<Rgb> = hit_idx.iter().map(|&i| batch.targets[i]).collect();

        let mut omega_bar = vec![V::zero(); nh];
        let mut eta_bar = vec![0.0; nh];
        let mut n_bar = vec![V::zero(); nh];

        if let Some((v, cbar)) = loss_pix(&rendered, &targets) {
            comps.pix = v;
            for k in 0..nh {
                let Some(s) = &shading[k] else { continue };
                let cb = Rgb(std::array::from_fn(|c| cbar[k][c] * w8.pix));
                let mut f_bar = 0.0;
                let mut k_bar = 0.0;
                let mut wr_bar = V::zero();
                let mut wt_bar = V::zero();
                for c in 0..3 {
                    f_bar += cb[c] * (s.e_r[c] - s.k * s.e_t[c]);
                    k_bar += cb[c] * (1.0 - s.f_r) * s.e_t[c];
                    wr_bar += s.j_r[c] * (cb[c] * s.f_r);
                    wt_bar += s.j_t[c] * (cb[c] * s.k * (1.0 - s.f_r));
                }
                let eta = rbn_ev.outputs[k].unwrap().eta_t;
                let dk_deta = -2.0 * self.ior_air * self.ior_air / (eta * eta * eta);
                eta_bar[k] += f_bar * s.df_deta + k_bar * dk_deta;
                omega_bar[k] += wt_bar;
                let cos_bar = if s.cos_active { f_bar * s.df_dcos } else { 0.0 };
                n_bar[k] = n_bar[k] + ws[k] * cos_bar + reflect_normal_vjp(ws[k], ns[k], wr_bar);
            }
        }

        // guidance toward the single-interface refraction
        let ior_guide = IorPair::new(self.ior_air, ctx.ior_dataset);
        let mut rg_rows = Vec::new();
        let mut rg_t = Vec::new();
        let mut rg_a = Vec::new();
        for k in 0..nh {
            if !valid[k] {
                continue;
            }
            if let Some(a) = guidance_direction(ws[k], ns[k], ior_guide) {
                rg_rows.push(k);
                rg_t.push(rbn_ev.outputs[k].unwrap().omega_t);
                rg_a.push(a);
            }
        }
        let (rg, rg_grad) = loss_rg(&rg_t, &rg_a);
        comps.rg = rg;
        let (_, rg_grad_a) = loss_rg(&rg_a, &rg_t);
        for (j, &k) in rg_rows.iter().enumerate() {
            omega_bar[k] += rg_grad[j] * ctx.lambda_rg;
            // the guidance target moves with the normal
            if !ctx.detach_rbn_geometry {
                n_bar[k] += refract_normal_vjp(ws[k], ns[k], ior_guide, rg_grad_a[j] * ctx.lambda_rg);
            }
        }

        // smoothness over patches made only of hits
        let mut row_of = vec![usize::MAX; batch.len()];
        for (k, &i) in hit_idx.iter().enumerate() {
            row_of[i] = k;
        }
        let ppp = batch.pixels_per_patch();
        let mut rs_rows: Vec<Vec<usize>> = Vec::new();
        for p in 0..batch.patches.len() {
            let rows: Vec<usize> = (p * ppp..(p + 1) * ppp).map(|i| row_of[i]).collect();
            if rows.iter().all(|&k| k != usize::MAX && valid[k]) {
                rs_rows.push(rows);
            }
        }
        let rs_dirs: Vec<Vec<V>> = rs_rows
            .iter()
            .map(|rows| rows.iter().map(|&k| rbn_ev.outputs[k].unwrap().omega_t).collect())
            .collect();
        let rs_refs: Vec<&[V]> = rs_dirs.iter().map(|v| v.as_slice()).collect();
        let (rs, rs_grad) = loss_rs(&rs_refs);
        comps.rs = rs;
        for (rows, grads) in rs_rows.iter().zip(&rs_grad) {
            for (&k, &g) in rows.iter().zip(grads) {
                omega_bar[k] += g * w8.rs;
            }
        }

        let d_in = self.rbn.backprop(&rbn_ev, &omega_bar, &eta_bar, &mut rbn_grads);

        if let (Some(s), Some(ev), Some(grads)) = (sdf, &sdf_ev, sdf_grads.as_mut()) {
            let mut x_extra = vec![V::zero(); nh];
            if !ctx.detach_rbn_geometry {
                let (xb, nb) = self.rbn.input_cotangents(&xs, &d_in);
                for k in 0..nh {
                    if valid[k] {
                        x_extra[k] = xb[k];
                        n_bar[k] += nb[k];
                    }
                }
            }
            // normal = g / |g|
            let g_bar: Vec<V> = (0..nh)
                .map(|k| {
                    if glen[k] > 0.0 {
                        (n_bar[k] - ns[k] * ns[k].dot(n_bar[k])) / glen[k]
                    } else {
                        V::zero()
                    }
                })
                .collect();
            let x_bar = from_t(&s.backprop(ev, None, Some(&to_t::<T>(&g_bar)), grads));
            // the hit point slides along the ray as the field changes
            let f_bar: Vec<T> = (0..nh)
                .map(|k| {
                    let gd = gs[k].dot(ds[k]);
                    if gd.abs() > GRAZING_GUARD {
                        T::lit(-(x_bar[k] + x_extra[k]).dot(ds[k]) / gd)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            s.backprop(ev, Some(&f_bar), None, grads);
        }

        // ---- silhouette on the complement
        let field = self.geometry.field();
        let bounds = field.bounds();
        let k_samples = ctx.sil_samples;
        let mut pts = Vec::with_capacity(miss_idx.len() * k_samples);
        let mut crosses = Vec::with_capacity(miss_idx.len());
        for &i in &miss_idx {
            let r = &batch.rays[i];
            match bounds.clip(r) {
                Some((t0, t1)) => {
                    crosses.push(true);
                    for s in 0..k_samples {
                        pts.push(r.at(t0 + (t1 - t0) * (s as f64 + 0.5) / k_samples as f64));
                    }
                }
                None => crosses.push(false),
            }
        }
        let mut vals = vec![0.0; pts.len()];
        field.distance_batch(&pts, &mut vals);
        let mut z = Vec::with_capacity(miss_idx.len());
        let mut argmin = Vec::with_capacity(miss_idx.len());
        let mut off = 0;
        for &c in &crosses {
            if c {
                let seg = &vals[off..off + k_samples];
                let (j, &m) = seg.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
                z.push(Some(m));
                argmin.push(Some(pts[off + j]));
                off += k_samples;
            } else {
                z.push(None);
                argmin.push(None);
            }
        }
        let inside: Vec<bool> = miss_idx.iter().map(|&i| batch.mask[i]).collect();
        let (sil, dz) = loss_sil(&z, &inside, ctx.alpha);
        comps.sil = sil;
        if let (Some(s), Some(grads)) = (sdf, sdf_grads.as_mut()) {
            let (p, fb): (Vec<V>, Vec<T>) = argmin
                .iter()
                .zip(&dz)
                .filter_map(|(p, &d)| p.map(|p| (p, T::lit(d * w8.sil))))
                .unzip();
            if !p.is_empty() {
                s.backprop_values(&p, &fb, grads);
            }
        }

        // ---- eikonal
        match sdf {
            Some(s) if !eik_points.is_empty() => {
                let ev = s.eval(eik_points);
                let g: Vec<V> = (0..eik_points.len()).map(|k| ev.gradient(k)).collect();
                let (eik, g_bar) = loss_eik(&g);
                comps.eik = eik;
                if let Some(grads) = sdf_grads.as_mut() {
                    let scaled: Vec<V> = g_bar.iter().map(|&v| v * w8.eik).collect();
                    s.backprop(&ev, None, Some(&to_t::<T>(&scaled)), grads);
                }
            }
            _ => {
                let mut g = vec![V::zero(); eik_points.len()];
                field.gradient_batch(eik_points, &mut g);
                comps.eik = loss_eik(&g).0;
            }
        }

        Evaluation {
            components: comps,
            total: weighted_total(&comps, w8, ctx.lambda_rg),
            sdf_grads,
            rbn_grads,
            hit_count: nh,
            miss_count: miss_idx.len(),
        }
    }
}

/// One optimization step's log record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub components: LossComponents,
    pub total: f64,
    pub lambda_rg: f64,
    pub alpha: f64,
}

pub const LOG_HEADER: &str = "step\tloss_total\tloss_pix\tloss_sil\tloss_e\tloss_rg\tloss_rs\tlambda_rg\talpha";

impl StepReport {
    pub fn log_line(&self) -> String {
        let c = &self.components;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.total, c.pix, c.sil, c.eik, c.rg, c.rs, self.lambda_rg, self.alpha
        )
    }
}

pub struct Trainer<'a, T: Real> {
    pub config: TrainConfig,
    pub model: Model<T>,
    dataset: &'a Dataset,
    train_views: Vec<&'a View>,
    sdf_adam: Option<Adam<T>>,
    rbn_adam: Adam<T>,
    step: usize,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let train_views: Vec<&View> = dataset.split(Split::Train).collect();
        if train_views.is_empty() {
            return Err(TrainError::Config("dataset has no training views".into()));
        }
        if train_views
            .iter()
            .any(|v| v.camera.width < config.patch_size || v.camera.height < config.patch_size)
        {
            return Err(TrainError::Config("patch_size exceeds the image size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sdf_seed: u64 = rng.random();
        let rbn_seed: u64 = rng.random();
        let geometry = if config.freeze_geometry {
            let spec = dataset.meta.shape.clone().ok_or_else(|| {
                TrainError::Config("frozen geometry needs the dataset's analytic shape in meta.json".into())
            })?;
            Geometry::analytic(spec).map_err(|e| TrainError::Config(e.to_string()))?
        } else {
            Geometry::Learned(NeuralSdf::new(config.sdf, sdf_seed))
        };
        let rbn = RayBendingNet::new(config.rbn, rbn_seed);
        let adam_cfg = Self::adam_config(&config);
        let sdf_adam = match &geometry {
            Geometry::Learned(s) => Some(Adam::new(s.net.param_count(), adam_cfg)),
            Geometry::Analytic { .. } => None,
        };
        let rbn_adam = Adam::new(rbn.net.param_count(), adam_cfg);
        let mut model = Model::new(geometry, rbn);
        model.ior_air = dataset.meta.ior_air;
        Ok(Self {
            config,
            model,
            dataset,
            train_views,
            sdf_adam,
            rbn_adam,
            step: 0,
            rng,
        })
    }

    fn adam_config(config: &TrainConfig) -> AdamConfig {
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn lambda_rg(&self) -> f64 {
        self.config.weights.lambda_rg(self.step, self.config.iterations)
    }

    pub fn alpha(&self) -> f64 {
        alpha_schedule(self.config.alpha_init, self.step, self.config.iterations)
    }

    /// Loss settings at the current step.
    pub fn context(&self) -> LossContext<'_> {
        LossContext {
            env: &self.dataset.env,
            weights: &self.config.weights,
            lambda_rg: self.lambda_rg(),
            alpha: self.alpha(),
            ior_dataset: self.dataset.meta.ior_object,
            sil_samples: self.config.sil_samples,
            train_geometry: !self.config.freeze_geometry,
            detach_rbn_geometry: self.config.detach_rbn_geometry,
        }
    }

    fn eik_points(&mut self) -> Vec<V> {
        if !self.model.geometry.is_learned() {
            return Vec::new();
        }
        let b = self.model.geometry.field().bounds();
        (0..self.config.eik_samples)
            .map(|_| {
                V::new(
                    self.rng.random_range(b.min.x..b.max.x),
                    self.rng.random_range(b.min.y..b.max.y),
                    self.rng.random_range(b.min.z..b.max.z),
                )
            })
            .collect()
    }

    /// Samples a batch, evaluates the loss and applies one Adam update.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let batch = sample_batch(
            &self.train_views,
            self.config.patches,
            self.config.patch_size,
            self.model.geometry.field(),
            &mut self.rng,
        );
        let eik = self.eik_points();
        let ctx = self.context();
        let (lambda_rg, alpha) = (ctx.lambda_rg, ctx.alpha);
        let ev = self.model.loss_and_grads(&batch, &eik, &ctx);
        if let Some(component) = ev.components.non_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                component,
            });
        }
        if !ev.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                component: "total",
            });
        }
        self.rbn_adam.step(self.model.rbn.net.params_mut(), &ev.rbn_grads);
        if let (Geometry::Learned(s), Some(adam), Some(g)) =
            (&mut self.model.geometry, self.sdf_adam.as_mut(), ev.sdf_grads.as_ref())
        {
            adam.step(s.net.params_mut(), g);
        }
        let report = StepReport {
            step: self.step,
            components: ev.components,
            total: ev.total,
            lambda_rg,
            alpha,
        };
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> crate::nn::Checkpoint {
        self.model.to_checkpoint(
            self.step as u64,
            Self::adam_config(&self.config),
            self.sdf_adam.as_ref(),
            Some(&self.rbn_adam),
        )
    }

    /// Runs the remaining iterations, writing `train.log`, periodic
    /// checkpoints under `checkpoints/` and the final `model.nmto`.
    pub fn run(&mut self, out_dir: impl AsRef<Path>) -> Result<TrainSummary, TrainError> {
        let out = out_dir.as_ref();
        let ckpt_dir = out.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        fs::write(out.join("config.toml"), self.config.to_toml())?;
        let mut log = BufWriter::new(fs::File::create(out.join("train.log"))?);
        writeln!(log, "{LOG_HEADER}")?;
        let mut last = None;
        while self.step < self.config.iterations {
            let report = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    log.flush()?;
                    return Err(e);
                }
            };
            writeln!(log, "{}", report.log_line())?;
            last = Some(report);
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.iterations {
                log.flush()?;
                self.checkpoint()
                    .save(ckpt_dir.join(format!("step_{:06}.nmto", self.step)))?;
            }
        }
        log.flush()?;
        let ckpt = self.checkpoint();
        ckpt.save(ckpt_dir.join(format!("step_{:06}.nmto", self.step)))?;
        let model_path = out.join("model.nmto");
        ckpt.save(&model_path)?;
        Ok(TrainSummary {
            steps: self.step,
            last,
            model_path,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<StepReport>,
    pub model_path: PathBuf,
}

/// Trains from scratch on `dataset` and writes the results to `out_dir`.
pub fn train<T: Real>(
    dataset: &Dataset,
    config: TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainSummary, TrainError> {
    Trainer::<T>::new(dataset, config)?.run(out_dir)
}
