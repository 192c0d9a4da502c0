//! Fully connected networks over row-major batches with exact reverse mode.
//!
//! Parameters live in one flat vector; every layer owns a row-major
//! `fan_out x fan_in` weight block followed by its bias. A layer flagged as
//! `skip` consumes `concat(h, x) / sqrt(2)` where `x` is the network input.
//!
//! Besides the usual backward pass, scalar-output networks support the
//! vector-Jacobian product of their input gradient (backward over backward),
//! which is what gradient-norm penalties and normal-dependent losses need.

use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, softplus, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// `softplus(beta * a) / beta`
    Softplus {
        beta: f64,
    },
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, a: T) -> T {
        match self {
            Activation::Identity => a,
            Activation::Softplus { beta } => {
                let b = T::lit(beta);
                softplus(b * a) / b
            }
        }
    }

    #[inline]
    pub fn d1<T: Real>(self, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Softplus { beta } => sigmoid(T::lit(beta) * a),
        }
    }

    #[inline]
    pub fn d2<T: Real>(self, a: T) -> T {
        match self {
            Activation::Identity => T::zero(),
            Activation::Softplus { beta } => {
                let s = sigmoid(T::lit(beta) * a);
                T::lit(beta) * s * (T::one() - s)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_out: usize,
    pub activation: Activation,
    /// Concatenate the network input to this layer's input.
    pub skip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub skip: bool,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl Layer {
    /// Width of the previous layer's output inside this layer's input.
    fn prev_width(&self, input_dim: usize) -> usize {
        if self.skip {
            self.fan_in - input_dim
        } else {
            self.fan_in
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    input_dim: usize,
    layers: Vec<Layer>,
    params: Vec<T>,
}

/// Activations recorded by [`Mlp::forward_tape`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    batch: usize,
    /// Per-layer input (after any skip concatenation).
    inputs: Vec<Vec<T>>,
    /// Per-layer pre-activation.
    pre: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[T] {
        &self.output
    }
}

/// Per-layer output cotangents of an input-gradient computation.
#[derive(Clone, Debug)]
pub struct GradTape<T> {
    d: Vec<Vec<T>>,
}

fn skip_scale<T: Real>() -> T {
    T::lit(std::f64::consts::FRAC_1_SQRT_2)
}

/// `C (rows x n) = A (rows x k) * W^T` with `W` stored `n x k`.
fn mul_wt<T: Real>(rows: usize, k: usize, n: usize, a: &[T], w: &[T], c: &mut [T]) {
    T::gemm(
        rows,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        w,
        1,
        k as isize,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

/// `C (rows x k) = A (rows x n) * W` with `W` stored `n x k`.
fn mul_w<T: Real>(rows: usize, n: usize, k: usize, a: &[T], w: &[T], c: &mut [T]) {
    T::gemm(
        rows,
        n,
        k,
        T::one(),
        a,
        n as isize,
        1,
        w,
        k as isize,
        1,
        T::zero(),
        c,
        k as isize,
        1,
    );
}

/// `G (n x k) += E^T (n x rows) * H (rows x k)`.
fn acc_et_h<T: Real>(rows: usize, n: usize, k: usize, e: &[T], h: &[T], g: &mut [T]) {
    T::gemm(
        n,
        rows,
        k,
        T::one(),
        e,
        1,
        n as isize,
        h,
        k as isize,
        1,
        T::one(),
        g,
        k as isize,
        1,
    );
}

impl<T: Real> Mlp<T> {
    /// Zero-initialized network.
    pub fn new(input_dim: usize, specs: &[LayerSpec]) -> Self {
        assert!(!specs.is_empty(), "network needs at least one layer");
        assert!(!specs[0].skip, "the first layer already sees the input");
        let mut layers = Vec::with_capacity(specs.len());
        let mut width = input_dim;
        let mut offset = 0;
        for s in specs {
            let fan_in = width + if s.skip { input_dim } else { 0 };
            layers.push(Layer {
                fan_in,
                fan_out: s.fan_out,
                activation: s.activation,
                skip: s.skip,
                w_offset: offset,
                b_offset: offset + fan_in * s.fan_out,
            });
            offset += (fan_in + 1) * s.fan_out;
            width = s.fan_out;
        }
        Self {
            input_dim,
            layers,
            params: vec![T::zero(); offset],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                fan_out: l.fan_out,
                activation: l.activation,
                skip: l.skip,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let l = &self.layers[layer];
        &self.params[l.w_offset..l.b_offset]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.layers[layer];
        &mut self.params[l.w_offset..l.b_offset]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.layers[layer];
        &mut self.params[l.b_offset..l.b_offset + l.fan_out]
    }

    /// Same architecture with a different scalar type.
    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            input_dim: self.input_dim,
            layers: self.layers.clone(),
            params: self.params.iter().map(|&p| U::lit(p.to_f64_lossy())).collect(),
        }
    }

    fn affine(&self, l: &Layer, batch: usize, input: &[T], pre: &mut [T]) {
        let w = &self.params[l.w_offset..l.b_offset];
        let b = &self.params[l.b_offset..l.b_offset + l.fan_out];
        mul_wt(batch, l.fan_in, l.fan_out, input, w, pre);
        for row in pre.chunks_exact_mut(l.fan_out) {
            for (v, &bi) in row.iter_mut().zip(b) {
                *v = *v + bi;
            }
        }
    }

    fn layer_input(&self, l: &Layer, batch: usize, prev: &[T], x: &[T]) -> Vec<T> {
        if !l.skip {
            return prev.to_vec();
        }
        let pw = l.prev_width(self.input_dim);
        let s = skip_scale::<T>();
        let mut out = Vec::with_capacity(batch * l.fan_in);
        for r in 0..batch {
            out.extend(prev[r * pw..(r + 1) * pw].iter().map(|&v| v * s));
            out.extend(x[r * self.input_dim..(r + 1) * self.input_dim].iter().map(|&v| v * s));
        }
        out
    }

    /// Batched evaluation without recording a tape.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(
            x.len(),
            batch * self.input_dim,
            "input length does not match the first layer"
        );
        let mut h = x.to_vec();
        for l in &self.layers {
            let input = if l.skip { self.layer_input(l, batch, &h, x) } else { h };
            let mut pre = vec![T::zero(); batch * l.fan_out];
            self.affine(l, batch, &input, &mut pre);
            if l.activation != Activation::Identity {
                for v in pre.iter_mut() {
                    *v = l.activation.apply(*v);
                }
            }
            h = pre;
        }
        h
    }

    pub fn forward_tape(&self, x: &[T], batch: usize) -> Tape<T> {
        assert_eq!(
            x.len(),
            batch * self.input_dim,
            "input length does not match the first layer"
        );
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let input = if l.skip { self.layer_input(l, batch, &h, x) } else { h };
            let mut pre = vec![T::zero(); batch * l.fan_out];
            self.affine(l, batch, &input, &mut pre);
            h = pre.iter().map(|&a| l.activation.apply(a)).collect();
            inputs.push(input);
            pres.push(pre);
        }
        Tape {
            batch,
            inputs,
            pre: pres,
            output: h,
        }
    }

    /// Reverse pass. `d_out` is the output cotangent (`batch x output_dim`);
    /// `inject[l]`, when given, is an extra cotangent on layer `l`'s
    /// pre-activation. Parameter gradients are accumulated into `grads`.
    /// Returns the input cotangent.
    pub fn backward_inject(
        &self,
        tape: &Tape<T>,
        d_out: &[T],
        inject: Option<&[Vec<T>]>,
        mut grads: Option<&mut [T]>,
    ) -> Vec<T> {
        let batch = tape.batch;
        assert_eq!(d_out.len(), batch * self.output_dim());
        if let Some(g) = grads.as_deref() {
            assert_eq!(g.len(), self.params.len());
        }
        let s = skip_scale::<T>();
        let mut x_bar = vec![T::zero(); batch * self.input_dim];
        let mut d = d_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let mut e: Vec<T> = d
                .iter()
                .zip(&tape.pre[li])
                .map(|(&di, &a)| di * l.activation.d1(a))
                .collect();
            if let Some(inj) = inject {
                for (ei, &v) in e.iter_mut().zip(&inj[li]) {
                    *ei = *ei + v;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                acc_et_h(
                    batch,
                    l.fan_out,
                    l.fan_in,
                    &e,
                    &tape.inputs[li],
                    &mut g[l.w_offset..l.b_offset],
                );
                let gb = &mut g[l.b_offset..l.b_offset + l.fan_out];
                for row in e.chunks_exact(l.fan_out) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
            }
            let mut p = vec![T::zero(); batch * l.fan_in];
            mul_w(
                batch,
                l.fan_out,
                l.fan_in,
                &e,
                &self.params[l.w_offset..l.b_offset],
                &mut p,
            );
            if li == 0 {
                for (a, &v) in x_bar.iter_mut().zip(&p) {
                    *a = *a + v;
                }
            } else if l.skip {
                let pw = l.prev_width(self.input_dim);
                let mut dn = Vec::with_capacity(batch * pw);
                for r in 0..batch {
                    let row = &p[r * l.fan_in..(r + 1) * l.fan_in];
                    dn.extend(row[..pw].iter().map(|&v| v * s));
                    for (a, &v) in x_bar[r * self.input_dim..(r + 1) * self.input_dim]
                        .iter_mut()
                        .zip(&row[pw..])
                    {
                        *a = *a + v * s;
                    }
                }
                d = dn;
            } else {
                d = p;
            }
        }
        x_bar
    }

    pub fn backward(&self, tape: &Tape<T>, d_out: &[T], grads: Option<&mut [T]>) -> Vec<T> {
        self.backward_inject(tape, d_out, None, grads)
    }

    /// Gradient of a scalar output with respect to the input, keeping the
    /// per-layer cotangents needed by [`Self::input_gradient_vjp`].
    pub fn input_gradient(&self, tape: &Tape<T>) -> (Vec<T>, GradTape<T>) {
        assert_eq!(self.output_dim(), 1, "input gradients need a scalar output");
        let batch = tape.batch;
        let s = skip_scale::<T>();
        let mut ds = vec![Vec::new(); self.layers.len()];
        let mut x_grad = vec![T::zero(); batch * self.input_dim];
        let mut d = vec![T::one(); batch];
        for (li, l) in self.layers.iter().enumerate().rev() {
            let e: Vec<T> = d
                .iter()
                .zip(&tape.pre[li])
                .map(|(&di, &a)| di * l.activation.d1(a))
                .collect();
            let mut p = vec![T::zero(); batch * l.fan_in];
            mul_w(
                batch,
                l.fan_out,
                l.fan_in,
                &e,
                &self.params[l.w_offset..l.b_offset],
                &mut p,
            );
            ds[li] = std::mem::take(&mut d);
            if li == 0 {
                for (a, &v) in x_grad.iter_mut().zip(&p) {
                    *a = *a + v;
                }
            } else if l.skip {
                let pw = l.prev_width(self.input_dim);
                let mut dn = Vec::with_capacity(batch * pw);
                for r in 0..batch {
                    let row = &p[r * l.fan_in..(r + 1) * l.fan_in];
                    dn.extend(row[..pw].iter().map(|&v| v * s));
                    for (a, &v) in x_grad[r * self.input_dim..(r + 1) * self.input_dim]
                        .iter_mut()
                        .zip(&row[pw..])
                    {
                        *a = *a + v * s;
                    }
                }
                d = dn;
            } else {
                d = p;
            }
        }
        (x_grad, GradTape { d: ds })
    }

    /// Vector-Jacobian product of [`Self::input_gradient`]: for a cotangent
    /// `g_bar` on the input gradient, accumulates `d(g_bar . grad_x f)/d params`
    /// into `grads` and returns `d(g_bar . grad_x f)/dx`. An optional
    /// cotangent `f_bar` on the output itself is folded into the same pass.
    pub fn input_gradient_vjp(
        &self,
        tape: &Tape<T>,
        gtape: &GradTape<T>,
        g_bar: &[T],
        f_bar: Option<&[T]>,
        grads: Option<&mut [T]>,
    ) -> Vec<T> {
        let batch = tape.batch;
        assert_eq!(g_bar.len(), batch * self.input_dim);
        let s = skip_scale::<T>();
        let n = self.layers.len();
        let mut inject = vec![Vec::new(); n];
        let mut grads = grads;
        // cotangent on the previous layer's output cotangent
        let mut d_bar: Vec<T> = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let p_bar: Vec<T> = if li == 0 {
                g_bar.to_vec()
            } else if l.skip {
                let pw = l.prev_width(self.input_dim);
                let mut v = Vec::with_capacity(batch * l.fan_in);
                for r in 0..batch {
                    v.extend(d_bar[r * pw..(r + 1) * pw].iter().map(|&x| x * s));
                    v.extend(
                        g_bar[r * self.input_dim..(r + 1) * self.input_dim]
                            .iter()
                            .map(|&x| x * s),
                    );
                }
                v
            } else {
                std::mem::take(&mut d_bar)
            };
            let w = &self.params[l.w_offset..l.b_offset];
            let mut e_bar = vec![T::zero(); batch * l.fan_out];
            mul_wt(batch, l.fan_in, l.fan_out, &p_bar, w, &mut e_bar);
            let d = &gtape.d[li];
            let pre = &tape.pre[li];
            if let Some(g) = grads.as_deref_mut() {
                let e: Vec<T> = d.iter().zip(pre).map(|(&di, &a)| di * l.activation.d1(a)).collect();
                acc_et_h(batch, l.fan_out, l.fan_in, &e, &p_bar, &mut g[l.w_offset..l.b_offset]);
            }
            let mut a_bar = Vec::with_capacity(e_bar.len());
            let mut next_d_bar = Vec::with_capacity(e_bar.len());
            for ((&eb, &di), &a) in e_bar.iter().zip(d).zip(pre) {
                next_d_bar.push(eb * l.activation.d1(a));
                a_bar.push(eb * di * l.activation.d2(a));
            }
            inject[li] = a_bar;
            d_bar = next_d_bar;
        }
        let zero;
        let d_out = match f_bar {
            Some(f) => f,
            None => {
                zero = vec![T::zero(); batch];
                &zero
            }
        };
        self.backward_inject(tape, d_out, Some(&inject), grads)
    }
}
