//! Fourier-feature positional encoding.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// `p -> [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]`,
/// each block elementwise over the input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl FourierEncoding {
    pub fn new(num_frequencies: usize, include_input: bool) -> Self {
        Self {
            num_frequencies,
            include_input,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * usize::from(self.include_input) + 2 * self.num_frequencies * input_dim
    }

    /// Writes the encoding of `p` into `out` (length `output_dim`).
    pub fn encode_into<T: Real>(&self, p: &[T], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.output_dim(p.len()));
        let d = p.len();
        let mut o = 0;
        if self.include_input {
            out[..d].copy_from_slice(p);
            o = d;
        }
        for k in 0..self.num_frequencies {
            let freq = T::lit((1u64 << k) as f64 * std::f64::consts::PI);
            for j in 0..d {
                let (s, c) = (freq * p[j]).sin_cos();
                out[o + j] = s;
                out[o + d + j] = c;
            }
            o += 2 * d;
        }
    }

    pub fn encode<T: Real>(&self, p: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_dim(p.len())];
        self.encode_into(p, &mut out);
        out
    }

    /// Encoding plus per-output first and second derivatives with respect to
    /// the single input coordinate each output depends on (see [`Self::source`]).
    pub fn encode_with_derivatives<T: Real>(&self, p: &[T], out: &mut [T], d1: &mut [T], d2: &mut [T]) {
        let d = p.len();
        let mut o = 0;
        if self.include_input {
            out[..d].copy_from_slice(p);
            d1[..d].fill(T::one());
            d2[..d].fill(T::zero());
            o = d;
        }
        for k in 0..self.num_frequencies {
            let freq = T::lit((1u64 << k) as f64 * std::f64::consts::PI);
            for j in 0..d {
                let (s, c) = (freq * p[j]).sin_cos();
                out[o + j] = s;
                out[o + d + j] = c;
                d1[o + j] = freq * c;
                d1[o + d + j] = -freq * s;
                d2[o + j] = -freq * freq * s;
                d2[o + d + j] = -freq * freq * c;
            }
            o += 2 * d;
        }
    }

    /// Input coordinate that output `index` depends on.
    #[inline]
    pub fn source(&self, index: usize, input_dim: usize) -> usize {
        index % input_dim
    }
}
