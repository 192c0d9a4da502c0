//! Ray-bending network: `(omega_i, x, n) -> (omega_t, eta_t)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::FourierEncoding;
use super::mlp::{Activation, LayerSpec, Mlp, Tape};
use crate::error::DegenerateDirection;
use crate::math::Vec3;
use crate::scalar::{sigmoid, softplus, Real};

type V = Vec3<f64>;

const RAW_NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RbnConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub dir_frequencies: usize,
    pub pos_frequencies: usize,
    pub beta: f64,
}

impl Default for RbnConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 4,
            width: 256,
            dir_frequencies: 6,
            pos_frequencies: 8,
            beta: 1.0,
        }
    }
}

impl RbnConfig {
    pub fn dir_encoding(&self) -> FourierEncoding {
        FourierEncoding::new(self.dir_frequencies, true)
    }

    pub fn pos_encoding(&self) -> FourierEncoding {
        FourierEncoding::new(self.pos_frequencies, true)
    }

    pub fn input_dim(&self) -> usize {
        self.dir_encoding().output_dim(3) + self.pos_encoding().output_dim(3) + 3
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err("ray-bending network needs at least one hidden layer of nonzero width".into());
        }
        if !(self.beta > 0.0) {
            return Err("softplus beta must be positive".into());
        }
        Ok(())
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![
            LayerSpec {
                fan_out: self.width,
                activation: Activation::Softplus { beta: self.beta },
                skip: false,
            };
            self.hidden_layers
        ];
        specs.push(LayerSpec {
            fan_out: 4,
            activation: Activation::Identity,
            skip: false,
        });
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbnOutput {
    pub omega_t: V,
    pub eta_t: f64,
}

/// Forward record for backpropagation through the output heads.
pub struct RbnEval<T> {
    pub batch: usize,
    tape: Tape<T>,
    /// Per-row results; `None` where the direction head collapsed.
    pub outputs: Vec<Option<RbnOutput>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBendingNet<T> {
    pub net: Mlp<T>,
    config: RbnConfig,
}

impl<T: Real> RayBendingNet<T> {
    pub fn new(config: RbnConfig, seed: u64) -> Self {
        let mut s = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = s.net.layers().len();
        for li in 0..n_layers {
            let fan_in = s.net.layers()[li].fan_in;
            let gain = if li + 1 == n_layers { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
            for w in s.net.weights_mut(li) {
                *w = T::lit(normal.sample(&mut rng));
            }
        }
        s
    }

    pub fn zeros(config: RbnConfig) -> Self {
        Self {
            net: Mlp::new(config.input_dim(), &config.layer_specs()),
            config,
        }
    }

    pub fn from_parts(net: Mlp<T>, config: RbnConfig) -> Self {
        assert_eq!(
            net.input_dim(),
            config.input_dim(),
            "network input does not match the encodings"
        );
        Self { net, config }
    }

    pub fn config(&self) -> &RbnConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> RayBendingNet<U> {
        RayBendingNet::from_parts(self.net.cast(), self.config)
    }

    /// Network input rows for a batch of `(omega_i, x, n)` triples.
    pub fn inputs(&self, omega_i: &[V], x: &[V], n: &[V]) -> Vec<T> {
        assert!(omega_i.len() == x.len() && x.len() == n.len());
        let (de, pe) = (self.config.dir_encoding(), self.config.pos_encoding());
        let (dd, pd) = (de.output_dim(3), pe.output_dim(3));
        let width = dd + pd + 3;
        let mut out = vec![T::zero(); omega_i.len() * width];
        for (i, row) in out.chunks_exact_mut(width).enumerate() {
            let lit = |v: V| [T::lit(v.x), T::lit(v.y), T::lit(v.z)];
            de.encode_into(&lit(omega_i[i]), &mut row[..dd]);
            pe.encode_into(&lit(x[i]), &mut row[dd..dd + pd]);
            row[dd + pd..].copy_from_slice(&lit(n[i]));
        }
        out
    }

    fn heads(raw: &[T]) -> Option<RbnOutput> {
        let r = V::new(raw[0].to_f64_lossy(), raw[1].to_f64_lossy(), raw[2].to_f64_lossy());
        let len = r.norm();
        if !(len >= RAW_NORM_FLOOR) {
            return None;
        }
        Some(RbnOutput {
            omega_t: r / len,
            eta_t: 1.0 + softplus(raw[3].to_f64_lossy()),
        })
    }

    pub fn eval(&self, omega_i: V, x: V, n: V) -> Result<RbnOutput, DegenerateDirection> {
        self.eval_batch(&[omega_i], &[x], &[n]).pop().unwrap()
    }

    pub fn eval_batch(&self, omega_i: &[V], x: &[V], n: &[V]) -> Vec<Result<RbnOutput, DegenerateDirection>> {
        let input = self.inputs(omega_i, x, n);
        let raw = self.net.forward(&input, omega_i.len());
        raw.chunks_exact(4)
            .map(|r| Self::heads(r).ok_or(DegenerateDirection))
            .collect()
    }

    pub fn eval_tape(&self, omega_i: &[V], x: &[V], n: &[V]) -> RbnEval<T> {
        let input = self.inputs(omega_i, x, n);
        let tape = self.net.forward_tape(&input, omega_i.len());
        let outputs = tape.output().chunks_exact(4).map(Self::heads).collect();
        RbnEval {
            batch: omega_i.len(),
            tape,
            outputs,
        }
    }

    /// Backpropagates cotangents on `omega_t` (`batch` vectors) and `eta_t`
    /// into `grads`. Rows whose direction collapsed are skipped. Returns the
    /// cotangent on the network input rows.
    pub fn backprop(&self, ev: &RbnEval<T>, omega_bar: &[V], eta_bar: &[f64], grads: &mut [T]) -> Vec<T> {
        let raw = ev.tape.output();
        let mut d_out = vec![T::zero(); ev.batch * 4];
        for i in 0..ev.batch {
            let Some(out) = ev.outputs[i] else { continue };
            let r = &raw[4 * i..4 * i + 4];
            let len = V::new(r[0].to_f64_lossy(), r[1].to_f64_lossy(), r[2].to_f64_lossy()).norm();
            let w = out.omega_t;
            let gb = omega_bar[i];
            // normalization Jacobian removes the radial component
            let g = (gb - w * w.dot(gb)) / len;
            d_out[4 * i] = T::lit(g.x);
            d_out[4 * i + 1] = T::lit(g.y);
            d_out[4 * i + 2] = T::lit(g.z);
            d_out[4 * i + 3] = T::lit(eta_bar[i]) * sigmoid(r[3]);
        }
        self.net.backward(&ev.tape, &d_out, Some(grads))
    }

    /// Maps input-row cotangents back onto the hit point and normal.
    pub fn input_cotangents(&self, x: &[V], d_in: &[T]) -> (Vec<V>, Vec<V>) {
        let (de, pe) = (self.config.dir_encoding(), self.config.pos_encoding());
        let (dd, pd) = (de.output_dim(3), pe.output_dim(3));
        let width = dd + pd + 3;
        let (mut enc, mut d1, mut d2) = (vec![T::zero(); pd], vec![T::zero(); pd], vec![T::zero(); pd]);
        let mut x_bar = Vec::with_capacity(x.len());
        let mut n_bar = Vec::with_capacity(x.len());
        for (i, row) in d_in.chunks_exact(width).enumerate() {
            let p = [T::lit(x[i].x), T::lit(x[i].y), T::lit(x[i].z)];
            pe.encode_with_derivatives(&p, &mut enc, &mut d1, &mut d2);
            let mut xb = [0.0; 3];
            for o in 0..pd {
                xb[pe.source(o, 3)] += (row[dd + o] * d1[o]).to_f64_lossy();
            }
            x_bar.push(V::from_array(xb));
            let nb = &row[dd + pd..];
            n_bar.push(V::new(nb[0].to_f64_lossy(), nb[1].to_f64_lossy(), nb[2].to_f64_lossy()));
        }
        (x_bar, n_bar)
    }
}
