//! AdamW with decoupled weight decay and lazily updated embedding rows.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamId, ParamStore};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Rows of one matrix parameter that take part in this step.
#[derive(Debug, Clone, Copy)]
pub struct RowMask<'a> {
    pub param: ParamId,
    pub width: usize,
    pub active: &'a [bool],
}

/// Optimizer state. Moments exist only for trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Option<Vec<T>>>,
    pub v: Vec<Option<Vec<T>>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, trainable: &[bool]) -> Self {
        let zeros = || -> Vec<Option<Vec<T>>> {
            params
                .iter()
                .map(|(id, p)| trainable[id.0].then(|| vec![T::zero(); p.data.len()]))
                .collect()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Keeps moment buffers in step with parameters that grew (new embedding rows).
    pub fn sync_shapes(&mut self, params: &ParamStore<T>) {
        for (id, p) in params.iter() {
            for buf in [&mut self.m[id.0], &mut self.v[id.0]].into_iter().flatten() {
                buf.resize(p.data.len(), T::zero());
            }
        }
    }

    /// One update. Parameters without moments are left untouched; inside
    /// `rows.param`, only rows flagged active are read or written.
    pub fn step(&mut self, cfg: &AdamWConfig, params: &mut ParamStore<T>, grads: &Grads<T>, rows: Option<RowMask<'_>>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - Float::powi(cfg.beta1, t);
        let bc2 = 1.0 - Float::powi(cfg.beta2, t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let step = T::lit(cfg.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / Float::sqrt(bc2));
        let eps = T::lit(cfg.eps);
        let decay = T::one() - T::lit(cfg.lr * cfg.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let g = &grads.data[i];
            let mask = rows.filter(|r| r.param.0 == i);
            for j in 0..p.data.len() {
                if let Some(r) = mask {
                    if !r.active.get(j / r.width).copied().unwrap_or(false) {
                        continue;
                    }
                }
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                p.data[j] = p.data[j] * decay - step * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / (norm + 1e-6)));
    }
    norm
}
