//! Denoising, localized-refinement and total objectives.
//!
//! Scalars are accumulated in `f64` regardless of the model precision so the
//! logged breakdown can be recombined exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::ConceptId;
use crate::image::Mask;
use crate::nn::AttentionRecord;
use crate::{Error, Real, Result};

/// Clamp applied to attention probabilities before taking logs.
pub const CLAMP_EPS: f64 = 1e-6;

/// Mean squared error over all elements.
pub fn ldm_loss<T: Real>(eps: &[T], eps_hat: &[T]) -> Result<f64> {
    if eps.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "eps has {} elements, eps_hat has {}",
            eps.len(),
            eps_hat.len()
        )));
    }
    if eps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps
        .iter()
        .zip(eps_hat)
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(sum / eps.len() as f64)
}

/// [`ldm_loss`] and its gradient with respect to `eps_hat`, scaled by `weight`.
pub fn ldm_loss_grad<T: Real>(eps: &[T], eps_hat: &[T], weight: f64) -> Result<(f64, Vec<T>)> {
    let loss = ldm_loss(eps, eps_hat)?;
    let k = 2.0 * weight / eps.len().max(1) as f64;
    let grad = eps.iter().zip(eps_hat).map(|(a, b)| T::lit(k * (b.f64() - a.f64()))).collect();
    Ok((loss, grad))
}

/// Area-averages an `S × S` mask onto an `n × n` grid and keeps cells that are
/// at least half covered.
pub fn downsample_mask(mask: &Mask, n: usize) -> Result<Mask> {
    if mask.width != mask.height {
        return Err(Error::Shape(format!("mask is {}x{}, expected square", mask.width, mask.height)));
    }
    if n == 0 || mask.width % n != 0 {
        return Err(Error::IndivisibleSize {
            size: mask.width,
            target: n,
        });
    }
    let cell = mask.width / n;
    let mut out = Mask::zeros(n, n);
    for gy in 0..n {
        for gx in 0..n {
            let mut on = 0usize;
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    on += mask.get(x, y) as usize;
                }
            }
            out.set(gx, gy, 2 * on >= cell * cell);
        }
    }
    Ok(out)
}

fn check_inputs<T: Real>(
    attention: &AttentionRecord<T>,
    masks: &BTreeMap<ConceptId, Mask>,
    token_index: &BTreeMap<ConceptId, usize>,
) -> Result<()> {
    let n = attention.resolution;
    for (&cid, m) in masks {
        let &k = token_index.get(&cid).ok_or(Error::MissingToken(cid))?;
        if k >= attention.tokens {
            return Err(Error::DimensionMismatch(format!(
                "token position {k} for concept {cid} exceeds {} tokens",
                attention.tokens
            )));
        }
        if m.width != n || m.height != n {
            return Err(Error::DimensionMismatch(format!(
                "mask for concept {cid} is {}x{}, attention is {n}x{n}",
                m.width, m.height
            )));
        }
    }
    for map in &attention.maps {
        if map.data.len() != n * n * attention.tokens {
            return Err(Error::DimensionMismatch(format!(
                "attention map {} head {} has {} values, expected {}",
                map.layer,
                map.head,
                map.data.len(),
                n * n * attention.tokens
            )));
        }
    }
    Ok(())
}

/// Negated binary cross-entropy between each concept's placeholder-token
/// attention and its mask, averaged over cells, maps and concepts.
pub fn localized_refinement_loss<T: Real>(
    attention: &AttentionRecord<T>,
    masks: &BTreeMap<ConceptId, Mask>,
    token_index: &BTreeMap<ConceptId, usize>,
) -> Result<f64> {
    localized_refinement_impl(attention, masks, token_index, None)
}

/// [`localized_refinement_loss`] plus its gradient with respect to every
/// attention map (record order, full `N² × tokens` layout), scaled by `weight`.
pub fn localized_refinement_grad<T: Real>(
    attention: &AttentionRecord<T>,
    masks: &BTreeMap<ConceptId, Mask>,
    token_index: &BTreeMap<ConceptId, usize>,
    weight: f64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut grads: Vec<Vec<T>> = attention.maps.iter().map(|m| vec![T::zero(); m.data.len()]).collect();
    let loss = localized_refinement_impl(attention, masks, token_index, Some((&mut grads, weight)))?;
    Ok((loss, grads))
}

fn localized_refinement_impl<T: Real>(
    attention: &AttentionRecord<T>,
    masks: &BTreeMap<ConceptId, Mask>,
    token_index: &BTreeMap<ConceptId, usize>,
    mut grads: Option<(&mut Vec<Vec<T>>, f64)>,
) -> Result<f64> {
    check_inputs(attention, masks, token_index)?;
    if masks.is_empty() || attention.maps.is_empty() {
        return Ok(0.0);
    }
    let n = attention.resolution;
    let cells = n * n;
    let l = attention.tokens;
    let norm = (masks.len() * attention.maps.len() * cells) as f64;
    let (lo, hi) = (CLAMP_EPS, 1.0 - CLAMP_EPS);
    let mut total = 0.0;
    for (&cid, mask) in masks {
        let k = token_index[&cid];
        for (mi, map) in attention.maps.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..cells {
                let raw = map.data[i * l + k].f64();
                let a = raw.clamp(lo, hi);
                let on = mask.data[i] != 0;
                acc -= if on { Float::ln(a) } else { Float::ln(1.0 - a) };
                if let Some((g, w)) = grads.as_mut() {
                    if raw > lo && raw < hi {
                        let d = if on { -1.0 / a } else { 1.0 / (1.0 - a) };
                        g[mi][i * l + k] += T::lit(*w * d / norm);
                    }
                }
            }
            total += acc;
        }
    }
    Ok(total / norm)
}

/// Per-step objective breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ref: f64,
    pub l_prior: f64,
    pub l_local: f64,
    pub total: f64,
    pub mu: f64,
    pub gamma: f64,
}

/// `total = l_ref + mu·l_prior + gamma·l_local`.
pub fn total_loss(l_ref: f64, l_prior: f64, l_local: f64, mu: f64, gamma: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_ref", l_ref), ("l_prior", l_prior), ("l_local", l_local), ("mu", mu), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    if mu < 0.0 || gamma < 0.0 {
        return Err(Error::Config(format!("mu and gamma must be >= 0, got {mu}, {gamma}")));
    }
    let total = l_ref + mu * l_prior + gamma * l_local;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total = {total}")));
    }
    Ok(LossBreakdown {
        l_ref,
        l_prior,
        l_local,
        total,
        mu,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AttentionMap, LayerSide};
    use alloc::string::ToString;

    fn record(n: usize, tokens: usize, maps: Vec<Vec<f64>>) -> AttentionRecord<f64> {
        AttentionRecord {
            maps: maps
                .into_iter()
                .enumerate()
                .map(|(i, data)| AttentionMap {
                    layer: "down.0".to_string(),
                    side: LayerSide::Down,
                    head: i,
                    data,
                })
                .collect(),
            resolution: n,
            tokens,
        }
    }

    #[test]
    fn ldm_basic_cases() {
        assert_eq!(ldm_loss(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ldm_loss(&[1.0f64; 8], &[0.0; 8]).unwrap(), 1.0);
        assert!(matches!(ldm_loss(&[1.0f64], &[]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn downsample_cases() {
        let q = Mask::from_bits(8, 8, &(0..64).map(|i| ((i / 8) < 4 && (i % 8) < 4) as u8).collect::<Vec<_>>()).unwrap();
        let d = downsample_mask(&q, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(d.get(x, y), x < 2 && y < 2);
            }
        }
        assert!(matches!(downsample_mask(&q, 3), Err(Error::IndivisibleSize { size: 8, target: 3 })));
    }

    #[test]
    fn midpoint_is_ln2_and_target_is_near_zero() {
        let mask = Mask::from_bits(2, 2, &[1, 0, 0, 1]).unwrap();
        let masks = BTreeMap::from([(1, mask.clone())]);
        let idx = BTreeMap::from([(1, 0usize)]);
        let half = record(2, 1, vec![vec![0.5; 4]]);
        assert!((localized_refinement_loss(&half, &masks, &idx).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let exact = record(2, 1, vec![mask.data.iter().map(|&b| b as f64).collect()]);
        assert!(localized_refinement_loss(&exact, &masks, &idx).unwrap() <= 2e-6);
        assert_eq!(
            localized_refinement_loss(&half, &masks, &BTreeMap::new()),
            Err(Error::MissingToken(1))
        );
    }

    #[test]
    fn total_loss_weights() {
        let b = total_loss(1.0, 1.0, 1.0, 1.0, 0.04).unwrap();
        assert_eq!(b.total, 2.04);
        assert_eq!(total_loss(0.3, 5.0, 9.0, 0.0, 0.0).unwrap().total, 0.3);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 1.0, 0.0), Err(Error::NonFinite(_))));
    }
}
