//! Dense AdamW with decoupled weight decay.

use rayon::prelude::*;

use super::loss::SparseGradient;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    params: AdamWParams,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Dense scratch copy of the current gradient; zero outside touched entries.
    scratch: Vec<f64>,
    t: u64,
}

const CHUNK: usize = 1 << 14;

impl AdamW {
    pub fn new(n_params: usize, params: AdamWParams) -> Self {
        Self {
            params,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            scratch: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every coordinate of a feature-major parameter buffer.
    /// Coordinates without gradient still see moment decay and weight decay.
    pub fn step(&mut self, weights: &mut [f64], grad: &SparseGradient, lr: f64) {
        assert_eq!(weights.len(), self.m.len(), "parameter count changed");
        let d = grad.d_out();
        for (c, col) in grad.columns() {
            self.scratch[c * d..(c + 1) * d].copy_from_slice(col);
        }
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * p.weight_decay;
        let chunks = weights
            .par_chunks_mut(CHUNK)
            .zip(self.m.par_chunks_mut(CHUNK))
            .zip(self.v.par_chunks_mut(CHUNK))
            .zip(self.scratch.par_chunks(CHUNK));
        if lr == 0.0 {
            // Moments only; even a zero step could flip the sign of -0.0.
            chunks.for_each(|(((_, m), v), g)| {
                for i in 0..m.len() {
                    m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                    v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
                }
            });
        } else {
            chunks.for_each(|(((w, m), v), g)| {
                for i in 0..w.len() {
                    m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                    v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + p.epsilon);
                    w[i] = w[i] * decay - lr * update;
                }
            });
        }
        for (c, _) in grad.columns() {
            self.scratch[c * d..(c + 1) * d].fill(0.0);
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, constant afterwards.
pub fn warmup_lr(peak: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        peak
    } else {
        peak * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}
