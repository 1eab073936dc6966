//! Forward noising and the deterministic DDIM sampler.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::rng::{fill_normal, seeded};
use crate::{Error, Real, Result};

/// `size × size × channels` latent, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub size: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn zeros(size: usize, channels: usize) -> Self {
        LatentGrid {
            size,
            channels,
            values: vec![T::zero(); size * size * channels],
        }
    }

    pub fn from_values(size: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != size * size * channels {
            return Err(Error::DimensionMismatch(format!(
                "{size}x{size}x{channels} latent needs {} values, got {}",
                size * size * channels,
                values.len()
            )));
        }
        Ok(LatentGrid {
            size,
            channels,
            values,
        })
    }

    pub fn gaussian<R: rand::Rng + ?Sized>(size: usize, channels: usize, rng: &mut R) -> Self {
        let mut g = Self::zeros(size, channels);
        fill_normal(rng, &mut g.values, 1.0);
        g
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v.f64() * v.f64()).sum()
    }
}

/// Linear-beta diffusion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need T >= 2 and 0 < beta_start < beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cum = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas_cum })
    }

    /// T = 1000, betas 1e-4 → 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_cum(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn add_noise<T: Real>(z0: &LatentGrid<T>, t: usize, eps: &LatentGrid<T>, schedule: &NoiseSchedule) -> LatentGrid<T> {
    assert_eq!(z0.values.len(), eps.values.len(), "latent and noise shapes differ");
    let a = schedule.alpha_cum(t);
    let (sa, sn) = (T::lit(Float::sqrt(a)), T::lit(Float::sqrt(1.0 - a)));
    LatentGrid {
        size: z0.size,
        channels: z0.channels,
        values: z0.values.iter().zip(&eps.values).map(|(&z, &e)| sa * z + sn * e).collect(),
    }
}

/// Anything that predicts the noise in `z_t`.
pub trait EpsPredictor<T: Real> {
    fn predict_eps(&self, z_t: &LatentGrid<T>, t: usize, text_emb: &[T]) -> LatentGrid<T>;
}

impl<T: Real, F> EpsPredictor<T> for F
where
    F: Fn(&LatentGrid<T>, usize, &[T]) -> LatentGrid<T>,
{
    fn predict_eps(&self, z_t: &LatentGrid<T>, t: usize, text_emb: &[T]) -> LatentGrid<T> {
        self(z_t, t, text_emb)
    }
}

/// Uniformly strided timesteps, descending and always starting at `T − 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    (0..steps)
        .map(|i| {
            let t = Float::round(total as f64 - i as f64 * total as f64 / steps as f64) as usize;
            t.saturating_sub(1)
        })
        .collect()
}

/// Deterministic (η = 0) DDIM from `z_T ~ N(0, I)` drawn with `seed`.
pub fn ddim_sample<T: Real, M: EpsPredictor<T> + ?Sized>(
    model: &M,
    text_emb: &[T],
    steps: usize,
    seed: u64,
    schedule: &NoiseSchedule,
    size: usize,
    channels: usize,
) -> Result<LatentGrid<T>> {
    if steps == 0 {
        return Err(Error::Config("ddim steps must be >= 1".into()));
    }
    let mut rng = seeded(seed);
    let z_t = LatentGrid::gaussian(size, channels, &mut rng);
    Ok(ddim_from(model, text_emb, steps, schedule, z_t))
}

/// DDIM starting from an explicit `z_T`.
pub fn ddim_from<T: Real, M: EpsPredictor<T> + ?Sized>(
    model: &M,
    text_emb: &[T],
    steps: usize,
    schedule: &NoiseSchedule,
    mut z: LatentGrid<T>,
) -> LatentGrid<T> {
    let ts = ddim_timesteps(schedule.steps(), steps);
    for (i, &t) in ts.iter().enumerate() {
        let a_t = schedule.alpha_cum(t);
        let a_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_cum(p));
        let eps = model.predict_eps(&z, t, text_emb);
        let (sa, sn) = (T::lit(Float::sqrt(a_t)), T::lit(Float::sqrt(1.0 - a_t)));
        let (pa, pn) = (T::lit(Float::sqrt(a_prev)), T::lit(Float::sqrt(1.0 - a_prev)));
        for (zv, &e) in z.values.iter_mut().zip(&eps.values) {
            let x0 = (*zv - sn * e) / sa;
            *zv = pa * x0 + pn * e;
        }
    }
    z
}
