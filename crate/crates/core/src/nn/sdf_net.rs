//! Neural signed distance field with geometric initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::FourierEncoding;
use super::mlp::{Activation, GradTape, LayerSpec, Mlp, Tape};
use crate::math::{Aabb, Vec3};
use crate::scalar::Real;
use crate::sdf::DistanceField;

type V = Vec3<f64>;

/// Largest batch pushed through the network at once during tracing.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdfNetConfig {
    pub hidden_layers: usize,
    pub width: usize,
    /// Hidden layer index that also receives the encoded input.
    pub skip_layer: Option<usize>,
    pub frequencies: usize,
    pub beta: f64,
    /// Radius of the sphere approximated at initialization.
    pub init_radius: f64,
    /// Half extent of the cubic bounding box centred at the origin.
    pub bound: f64,
}

impl Default for SdfNetConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 8,
            width: 256,
            skip_layer: Some(4),
            frequencies: 6,
            beta: 100.0,
            init_radius: 1.0,
            bound: 1.5,
        }
    }
}

impl SdfNetConfig {
    pub fn encoding(&self) -> FourierEncoding {
        FourierEncoding::new(self.frequencies, true)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err("SDF network needs at least one hidden layer of nonzero width".into());
        }
        let d_in = self.encoding().output_dim(3);
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.hidden_layers {
                return Err(format!("skip layer {s} must lie in 1..{}", self.hidden_layers));
            }
            if self.width <= d_in {
                return Err(format!("width {} too small for a skip of {d_in} inputs", self.width));
            }
        }
        if !(self.beta > 0.0) || !(self.init_radius > 0.0) || !(self.bound > self.init_radius) {
            return Err("beta and init radius must be positive and the bound must exceed the radius".into());
        }
        Ok(())
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let d_in = self.encoding().output_dim(3);
        let act = Activation::Softplus { beta: self.beta };
        let mut specs = Vec::with_capacity(self.hidden_layers + 1);
        for l in 0..self.hidden_layers {
            let before_skip = self.skip_layer == Some(l + 1);
            specs.push(LayerSpec {
                fan_out: if before_skip { self.width - d_in } else { self.width },
                activation: act,
                skip: self.skip_layer == Some(l),
            });
        }
        specs.push(LayerSpec {
            fan_out: 1,
            activation: Activation::Identity,
            skip: false,
        });
        specs
    }
}

/// Evaluation record for second-order backpropagation.
pub struct SdfEval<T> {
    pub batch: usize,
    pub values: Vec<T>,
    /// Spatial gradients, `batch x 3`.
    pub gradients: Vec<T>,
    tape: Tape<T>,
    gtape: GradTape<T>,
    /// Gradient with respect to the encoded input.
    enc_grad: Vec<T>,
    d1: Vec<T>,
    d2: Vec<T>,
}

impl<T: Real> SdfEval<T> {
    pub fn gradient(&self, i: usize) -> V {
        let g = &self.gradients[3 * i..3 * i + 3];
        V::new(g[0].to_f64_lossy(), g[1].to_f64_lossy(), g[2].to_f64_lossy())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSdf<T> {
    pub net: Mlp<T>,
    config: SdfNetConfig,
    encoding: FourierEncoding,
    bounds: Aabb<f64>,
}

impl<T: Real> NeuralSdf<T> {
    /// Geometric initialization: the field starts close to the signed
    /// distance of a sphere of radius `init_radius`.
    pub fn new(config: SdfNetConfig, seed: u64) -> Self {
        let mut s = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = s.encoding.output_dim(3);
        let n_layers = s.net.layers().len();
        for li in 0..n_layers {
            let layer = s.net.layers()[li];
            let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
            if li + 1 == n_layers {
                let mean = std::f64::consts::PI.sqrt() / (fan_in as f64).sqrt();
                let normal = Normal::new(mean, 1e-4).unwrap();
                for w in s.net.weights_mut(li) {
                    *w = T::lit(normal.sample(&mut rng));
                }
                s.net.bias_mut(li)[0] = T::lit(-config.init_radius);
                continue;
            }
            let normal = Normal::new(0.0, 2f64.sqrt() / (fan_out as f64).sqrt()).unwrap();
            let w = s.net.weights_mut(li);
            for row in 0..fan_out {
                for col in 0..fan_in {
                    // encoded features beyond xyz start switched off
                    let dead = if li == 0 {
                        col >= 3
                    } else if layer.skip {
                        col >= fan_in - d_in + 3
                    } else {
                        false
                    };
                    let v = normal.sample(&mut rng);
                    w[row * fan_in + col] = if dead { T::zero() } else { T::lit(v) };
                }
            }
        }
        s.calibrate();
        s
    }

    /// Rescales the output layer so the radial slope averages one and the
    /// zero crossing sits at `init_radius`. Narrow networks otherwise start
    /// far from a metric field.
    fn calibrate(&mut self) {
        let r = self.config.init_radius;
        let dirs = crate::math::fibonacci_sphere(256);
        let at = |f: &Self, scale: f64| -> f64 {
            let pts: Vec<V> = dirs.iter().map(|&d| d * (r * scale)).collect();
            f.values(&pts).iter().map(|v| v.to_f64_lossy()).sum::<f64>() / pts.len() as f64
        };
        let slope = (at(self, 1.25) - at(self, 0.75)) / (0.5 * r);
        if !(slope > 1e-6) {
            return;
        }
        let last = self.net.layers().len() - 1;
        let k = T::lit(1.0 / slope);
        for w in self.net.weights_mut(last) {
            *w = *w * k;
        }
        let b = self.net.bias_mut(last);
        b[0] = b[0] * k;
        let offset = at(self, 1.0);
        let b = self.net.bias_mut(last);
        b[0] = b[0] - T::lit(offset);
    }

    pub fn zeros(config: SdfNetConfig) -> Self {
        let encoding = config.encoding();
        let net = Mlp::new(encoding.output_dim(3), &config.layer_specs());
        Self::from_parts(net, config)
    }

    pub fn from_parts(net: Mlp<T>, config: SdfNetConfig) -> Self {
        let encoding = config.encoding();
        assert_eq!(
            net.input_dim(),
            encoding.output_dim(3),
            "network input does not match the encoding"
        );
        Self {
            net,
            config,
            encoding,
            bounds: Aabb::centered(V::zero(), V::splat(config.bound)),
        }
    }

    pub fn config(&self) -> &SdfNetConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> NeuralSdf<U> {
        NeuralSdf::from_parts(self.net.cast(), self.config)
    }

    fn encode(&self, points: &[V]) -> Vec<T> {
        let d = self.encoding.output_dim(3);
        let mut out = vec![T::zero(); points.len() * d];
        for (p, o) in points.iter().zip(out.chunks_exact_mut(d)) {
            let q = [T::lit(p.x), T::lit(p.y), T::lit(p.z)];
            self.encoding.encode_into(&q, o);
        }
        out
    }

    pub fn values(&self, points: &[V]) -> Vec<T> {
        let enc = self.encode(points);
        self.net.forward(&enc, points.len())
    }

    /// Values, spatial gradients and everything needed to backpropagate
    /// through both.
    pub fn eval(&self, points: &[V]) -> SdfEval<T> {
        let batch = points.len();
        let d = self.encoding.output_dim(3);
        let mut enc = vec![T::zero(); batch * d];
        let mut d1 = vec![T::zero(); batch * d];
        let mut d2 = vec![T::zero(); batch * d];
        for (i, p) in points.iter().enumerate() {
            let q = [T::lit(p.x), T::lit(p.y), T::lit(p.z)];
            let r = i * d..(i + 1) * d;
            self.encoding
                .encode_with_derivatives(&q, &mut enc[r.clone()], &mut d1[r.clone()], &mut d2[r]);
        }
        let tape = self.net.forward_tape(&enc, batch);
        let (enc_grad, gtape) = self.net.input_gradient(&tape);
        let mut gradients = vec![T::zero(); batch * 3];
        for i in 0..batch {
            for o in 0..d {
                let j = o % 3;
                gradients[3 * i + j] = gradients[3 * i + j] + enc_grad[i * d + o] * d1[i * d + o];
            }
        }
        SdfEval {
            batch,
            values: tape.output().to_vec(),
            gradients,
            tape,
            gtape,
            enc_grad,
            d1,
            d2,
        }
    }

    /// Backpropagates cotangents on the values (`f_bar`, length `batch`) and
    /// on the spatial gradients (`g_bar`, `batch x 3`). Parameter gradients
    /// are accumulated into `grads`; the spatial cotangent (`batch x 3`) is
    /// returned.
    pub fn backprop(&self, ev: &SdfEval<T>, f_bar: Option<&[T]>, g_bar: Option<&[T]>, grads: &mut [T]) -> Vec<T> {
        let batch = ev.batch;
        let d = self.encoding.output_dim(3);
        let mut x_bar = vec![T::zero(); batch * 3];
        let enc_bar = match g_bar {
            Some(gb) => {
                let mut enc_g_bar = vec![T::zero(); batch * d];
                for i in 0..batch {
                    for o in 0..d {
                        let k = i * d + o;
                        let gj = gb[3 * i + o % 3];
                        enc_g_bar[k] = gj * ev.d1[k];
                        // the encoding Jacobian itself depends on x
                        x_bar[3 * i + o % 3] = x_bar[3 * i + o % 3] + ev.enc_grad[k] * gj * ev.d2[k];
                    }
                }
                self.net
                    .input_gradient_vjp(&ev.tape, &ev.gtape, &enc_g_bar, f_bar, Some(grads))
            }
            None => match f_bar {
                Some(fb) => self.net.backward(&ev.tape, fb, Some(grads)),
                None => return x_bar,
            },
        };
        for i in 0..batch {
            for o in 0..d {
                let k = i * d + o;
                x_bar[3 * i + o % 3] = x_bar[3 * i + o % 3] + enc_bar[k] * ev.d1[k];
            }
        }
        x_bar
    }
}

impl<T: Real> NeuralSdf<T> {
    /// First-order pass: accumulates parameter gradients of `sum f_bar * f(p)`.
    pub fn backprop_values(&self, points: &[V], f_bar: &[T], grads: &mut [T]) {
        let enc = self.encode(points);
        let tape = self.net.forward_tape(&enc, points.len());
        let _ = self.net.backward(&tape, f_bar, Some(grads));
    }
}

impl<T: Real> DistanceField for NeuralSdf<T> {
    fn distance(&self, p: V) -> f64 {
        self.values(&[p])[0].to_f64_lossy()
    }

    fn gradient(&self, p: V) -> V {
        self.eval(&[p]).gradient(0)
    }

    fn bounds(&self) -> Aabb<f64> {
        self.bounds
    }

    fn is_metric(&self) -> bool {
        false
    }

    fn distance_batch(&self, points: &[V], out: &mut [f64]) {
        for (pc, oc) in points.chunks(EVAL_CHUNK).zip(out.chunks_mut(EVAL_CHUNK)) {
            for (o, v) in oc.iter_mut().zip(self.values(pc)) {
                *o = v.to_f64_lossy();
            }
        }
    }

    fn gradient_batch(&self, points: &[V], out: &mut [V]) {
        for (pc, oc) in points.chunks(EVAL_CHUNK).zip(out.chunks_mut(EVAL_CHUNK)) {
            let ev = self.eval(pc);
            for (i, o) in oc.iter_mut().enumerate() {
                *o = ev.gradient(i);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> SdfNetConfig {
        SdfNetConfig {
            hidden_layers: 4,
            width: 48,
            skip_layer: Some(2),
            frequencies: 4,
            beta: 100.0,
            init_radius: 1.0,
            bound: 1.5,
        }
    }

    #[test]
    fn default_architecture() {
        let c = SdfNetConfig::default();
        c.validate().unwrap();
        let net: NeuralSdf<f32> = NeuralSdf::zeros(c);
        let layers = net.net.layers();
        assert_eq!(layers.len(), 9);
        assert_eq!(layers[0].fan_in, 39);
        assert_eq!(layers[3].fan_out, 256 - 39);
        assert!(layers[4].skip);
        assert_eq!(layers[4].fan_in, 256);
        assert_eq!(layers[8].fan_out, 1);
    }

    #[test]
    fn geometric_init_is_sphere_like() {
        for cfg in [SdfNetConfig::default(), small()] {
            let f: NeuralSdf<f64> = NeuralSdf::new(cfg, 0);
            assert!(f.distance(V::zero()) < 0.0);
            assert!(f.distance(V::new(0.0, 0.0, 2.0)) > 0.0);
            assert_eq!(f.distance(V::new(0.3, 0.1, 0.2)), f.distance(V::new(0.3, 0.1, 0.2)));
        }
        let f: NeuralSdf<f64> = NeuralSdf::new(SdfNetConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut dev, mut slope) = (0.0, 0.0);
        let n = 50;
        for _ in 0..n {
            let d = V::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let v = f.distance(d);
            assert!(v.abs() < 0.6);
            dev += v.abs() / n as f64;
            slope += f.gradient(d).dot(d) / n as f64;
        }
        assert!(dev < 0.25, "mean deviation {dev}");
        assert!((slope - 1.0).abs() < 0.1, "mean radial slope {slope}");
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let f: NeuralSdf<f64> = NeuralSdf::new(small(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-4;
        for _ in 0..100 {
            let p = V::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            );
            let g = f.gradient(p);
            for axis in 0..3 {
                let mut e = [0.0; 3];
                e[axis] = h;
                let e = V::from_array(e);
                let fd = (f.distance(p + e) - f.distance(p - e)) / (2.0 * h);
                assert!((fd - g[axis]).abs() <= 1e-3 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let cfg = SdfNetConfig {
            hidden_layers: 3,
            width: 24,
            skip_layer: Some(2),
            frequencies: 2,
            beta: 10.0,
            init_radius: 0.8,
            bound: 1.5,
        };
        let mut f: NeuralSdf<f64> = NeuralSdf::new(cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in f.net.params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let pts = [V::new(0.2, -0.5, 0.7), V::new(-0.9, 0.1, 0.3)];
        let fb = [0.7, -1.1];
        let gb = [0.3, -0.2, 0.5, 1.0, 0.4, -0.6];
        let objective = |f: &NeuralSdf<f64>, pts: &[V]| -> f64 {
            let ev = f.eval(pts);
            let a: f64 = ev.values.iter().zip(&fb).map(|(a, b)| a * b).sum();
            let b: f64 = ev.gradients.iter().zip(&gb).map(|(a, b)| a * b).sum();
            a + b
        };
        let ev = f.eval(&pts);
        let mut grads = vec![0.0; f.net.param_count()];
        let x_bar = f.backprop(&ev, Some(&fb), Some(&gb), &mut grads);
        let h = 1e-5;
        for i in 0..f.net.param_count() {
            let mut fp = f.clone();
            fp.net.params_mut()[i] += h;
            let a = objective(&fp, &pts);
            fp.net.params_mut()[i] -= 2.0 * h;
            let b = objective(&fp, &pts);
            let fd = (a - b) / (2.0 * h);
            assert!(
                (fd - grads[i]).abs() <= 1e-4 * fd.abs().max(grads[i].abs()).max(1e-2),
                "param {i}"
            );
        }
        for k in 0..6 {
            let mut pp = pts;
            let mut e = [0.0; 3];
            e[k % 3] = h;
            pp[k / 3] += V::from_array(e);
            let a = objective(&f, &pp);
            pp[k / 3] -= V::from_array(e) * 2.0;
            let b = objective(&f, &pp);
            let fd = (a - b) / (2.0 * h);
            assert!(
                (fd - x_bar[k]).abs() <= 1e-4 * fd.abs().max(1e-2),
                "x {k}: {fd} vs {}",
                x_bar[k]
            );
        }
    }
}
