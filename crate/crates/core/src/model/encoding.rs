//! Query featurization: rotation → format scalars → sin/cos features.

use std::f64::consts::PI;

use crate::rotation::{convert, Rotation, RotationFormat};

/// Layout of the query vector fed to the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryEncoding {
    pub format: RotationFormat,
    pub frequencies: usize,
    pub include_raw: bool,
}

impl QueryEncoding {
    pub fn matrix(frequencies: usize) -> Self {
        Self {
            format: RotationFormat::Matrix,
            frequencies,
            include_raw: false,
        }
    }

    /// With no frequencies the raw scalars are the query.
    pub fn dim(&self) -> usize {
        let base = self.format.width();
        if self.frequencies == 0 {
            base
        } else {
            2 * self.frequencies * base + if self.include_raw { base } else { 0 }
        }
    }

    fn emits_raw(&self) -> bool {
        self.frequencies == 0 || self.include_raw
    }

    pub fn raw_scalars(&self, r: &Rotation) -> Vec<f64> {
        match self.format {
            RotationFormat::Matrix => r.to_matrix_row_major().to_vec(),
            f => convert(r, f).components(),
        }
    }

    /// Writes the encoding of `r` into `out` (length [`Self::dim`]).
    pub fn encode_into(&self, r: &Rotation, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let raw = self.raw_scalars(r);
        let mut k = 0;
        if self.emits_raw() {
            out[..raw.len()].copy_from_slice(&raw);
            k = raw.len();
        }
        for &u in &raw {
            let mut freq = PI;
            for _ in 0..self.frequencies {
                let (s, c) = (freq * u).sin_cos();
                out[k] = s;
                out[k + 1] = c;
                k += 2;
                freq *= 2.0;
            }
        }
    }

    pub fn encode(&self, r: &Rotation) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(r, &mut out);
        out
    }

    /// Chain rule from `d f / d(encoding)` to `d f / d(raw scalars)`.
    pub fn backprop_to_raw(&self, raw: &[f64], grad_encoded: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; raw.len()];
        let mut k = 0;
        if self.emits_raw() {
            grad.copy_from_slice(&grad_encoded[..raw.len()]);
            k = raw.len();
        }
        for (g, &u) in grad.iter_mut().zip(raw) {
            let mut freq = PI;
            for _ in 0..self.frequencies {
                let (s, c) = (freq * u).sin_cos();
                *g += freq * (c * grad_encoded[k] - s * grad_encoded[k + 1]);
                k += 2;
                freq *= 2.0;
            }
        }
        grad
    }
}

/// Sin/cos encoding of the row-major rotation matrix at `2^j·π`, `j < m`.
/// With `m = 0` the nine matrix entries are returned unchanged.
pub fn positional_encode(r: &Rotation, m: usize) -> Vec<f64> {
    QueryEncoding::matrix(m).encode(r)
}
