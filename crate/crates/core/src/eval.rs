//! Attention-localization metric and its aggregation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use num_traits::Float;

use crate::data::ConceptId;
use crate::fusion::combo_label;
use crate::image::{Image, Mask};
use crate::losses::downsample_mask;
use crate::nn::backbone::latent_from_image;
use crate::nn::{add_noise, DiffusionBackbone};
use crate::prompting::TokenizedPrompt;
use crate::rng::{fill_normal, stream_rng, Stream};
use crate::{Error, Real, Result};

/// Keeps the `round(coverage_q · cells)` highest cells of `a` (ties broken by
/// lower index) and returns their IoU with `mask`.
pub fn attention_iou(a: &[f64], mask: &Mask, coverage_q: f64) -> Result<f64> {
    let cells = mask.width * mask.height;
    if a.len() != cells {
        return Err(Error::DimensionMismatch(alloc::format!(
            "attention map has {} cells, mask has {cells}",
            a.len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask { concept_id: 0 });
    }
    if !(coverage_q > 0.0 && coverage_q <= 1.0) {
        return Err(Error::Config(alloc::format!("coverage_q must be in (0, 1], got {coverage_q}")));
    }
    let keep = (Float::round(coverage_q * cells as f64) as usize).clamp(1, cells);
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    let mut selected = alloc::vec![false; cells];
    for &i in &order[..keep] {
        selected[i] = true;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (s, &m) in selected.iter().zip(&mask.data) {
        let m = m != 0;
        inter += usize::from(*s && m);
        union += usize::from(*s || m);
    }
    Ok(inter as f64 / union as f64)
}

/// [`attention_iou`] with the coverage set to the mask's area fraction.
pub fn attention_iou_auto(a: &[f64], mask: &Mask) -> Result<f64> {
    let q = mask.count() as f64 / (mask.width * mask.height) as f64;
    attention_iou(a, mask, q.max(f64::MIN_POSITIVE))
}

/// One noised forward pass at `t`; returns each masked concept's IoU between
/// its placeholder attention (mean over layers and heads) and its mask.
pub fn probe_concept_iou<T: Real, B: DiffusionBackbone<T>>(
    model: &B,
    image: &Image,
    masks: &BTreeMap<ConceptId, Mask>,
    tokens: &TokenizedPrompt,
    t: usize,
    seed: u64,
) -> Result<BTreeMap<ConceptId, f64>> {
    let n = model.latent_size();
    let z0 = latent_from_image::<T>(image, n)?;
    let mut eps = z0.clone();
    fill_normal(&mut stream_rng(seed, Stream::Eval, t as u64, 0), &mut eps.values, 1.0);
    let z_t = add_noise(&z0, t, &eps, model.schedule());
    let out = model.forward_denoise(&z_t, t, &model.encode_text(&tokens.token_ids));
    let mut result = BTreeMap::new();
    for (&cid, m) in masks {
        let &k = tokens
            .concept_token_index
            .get(&cid)
            .ok_or_else(|| Error::UnknownPlaceholder(alloc::format!("concept {cid}")))?;
        let small = downsample_mask(m, out.attention.resolution)?;
        let a = out.attention.mean_token_map(k);
        let iou = attention_iou_auto(&a, &small).map_err(|e| match e {
            Error::EmptyMask { .. } => Error::EmptyMask { concept_id: cid },
            other => other,
        })?;
        result.insert(cid, iou);
    }
    Ok(result)
}

/// Running per-concept and per-combination IoU samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAggregator {
    pub per_concept: BTreeMap<ConceptId, Vec<f64>>,
    /// Keyed by combination label (`"1-2"`); each entry is the sample's mean
    /// over its concepts.
    pub per_pair: BTreeMap<alloc::string::String, Vec<f64>>,
}

impl IouAggregator {
    pub fn add(&mut self, sample: &BTreeMap<ConceptId, f64>) {
        for (&cid, &v) in sample {
            self.per_concept.entry(cid).or_default().push(v);
        }
        if sample.len() >= 2 {
            let ids: Vec<ConceptId> = sample.keys().copied().collect();
            let mean = sample.values().sum::<f64>() / sample.len() as f64;
            self.per_pair.entry(combo_label(&ids)).or_default().push(mean);
        }
    }

    pub fn concept_means(&self) -> BTreeMap<ConceptId, f64> {
        self.per_concept.iter().map(|(&k, v)| (k, mean(v))).collect()
    }

    pub fn pair_means(&self) -> BTreeMap<alloc::string::String, f64> {
        self.per_pair.iter().map(|(k, v)| (k.clone(), mean(v))).collect()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadrant(n: usize) -> Mask {
        let mut m = Mask::zeros(n, n);
        for y in 0..n / 2 {
            for x in 0..n / 2 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn perfect_and_anti_alignment() {
        let m = quadrant(16);
        let a: Vec<f64> = m.data.iter().map(|&b| b as f64 * 3.0).collect();
        assert_eq!(attention_iou_auto(&a, &m).unwrap(), 1.0);
        let anti: Vec<f64> = m.data.iter().map(|&b| 1.0 - b as f64).collect();
        assert_eq!(attention_iou_auto(&anti, &m).unwrap(), 0.0);
        assert_eq!(attention_iou_auto(&a, &Mask::zeros(16, 16)), Err(Error::EmptyMask { concept_id: 0 }));
    }

    #[test]
    fn scale_invariant() {
        let m = quadrant(8);
        let a: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 64.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        assert_eq!(attention_iou_auto(&a, &m).unwrap(), attention_iou_auto(&b, &m).unwrap());
    }

    #[test]
    fn aggregation_means() {
        let mut agg = IouAggregator::default();
        agg.add(&BTreeMap::from([(1, 0.2), (2, 0.6)]));
        agg.add(&BTreeMap::from([(1, 0.4)]));
        assert!((agg.concept_means()[&1] - 0.3).abs() < 1e-15);
        assert!((agg.pair_means()["1-2"] - 0.4).abs() < 1e-15);
    }
}
