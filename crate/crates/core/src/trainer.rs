//! Selective fine-tuning: parameter selection, batch sampling with on-the-fly
//! fusion, and the optimizer step on the combined objective.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptId, ConceptSpec, DatasetManifest, SampleKind};
use crate::fusion::{compose_sample, cutout_from, prior_concepts, LoadedRecord, PlacementPolicy};
use crate::image::{Image, Mask};
use crate::losses::{downsample_mask, ldm_loss_grad, localized_refinement_grad, total_loss, LossBreakdown};
use crate::nn::backbone::latent_from_image;
use crate::nn::{add_noise, block_tag, BlockTag, DiffusionBackbone, Grads, LatentGrid, NoiseSchedule, ParamStore, ToyBackbone, ToyConfig};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, RowMask};
use crate::prompting::{register_placeholder, render_prompt, tokenize, ClassInit, PromptTemplate, TokenizedPrompt, Vocab};
use crate::rng::{fill_normal, stream_rng, Stream};
use crate::{Error, Real, Result};

/// Learning rate used with the full-scale backbone. The toy default is larger.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: u64,
    pub fuse_rate: f64,
    pub mu: f64,
    pub gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Subjects per fused sample.
    pub fusion_k: usize,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_steps: 5000,
            fuse_rate: 0.5,
            mu: 1.0,
            gamma: 0.04,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 2,
            seed: 42,
            fusion_k: 2,
            grad_clip: 1.0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.fuse_rate) {
            return bad(format!("fuse_rate must be in [0, 1], got {}", self.fuse_rate));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if self.batch_size == 0 || self.fusion_k == 0 {
            return bad("batch_size and fusion_k must be >= 1".into());
        }
        if self.mu < 0.0 || self.gamma < 0.0 {
            return bad(format!("mu and gamma must be >= 0, got {} and {}", self.mu, self.gamma));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Flags every parameter the fine-tune updates: text encoder, self-attention
/// and cross-attention. Everything else stays frozen.
pub fn select_trainable_parameters<T: Real>(params: &ParamStore<T>) -> Result<Vec<bool>> {
    params
        .iter()
        .map(|(_, p)| match block_tag(&p.name) {
            Some(BlockTag::TextEncoder | BlockTag::SelfAttention | BlockTag::CrossAttention) => Ok(true),
            Some(BlockTag::Conv | BlockTag::TimeEmbedding) => Ok(false),
            None => Err(Error::UnknownTag(p.name.clone())),
        })
        .collect()
}

/// Names of the selected parameters.
pub fn trainable_names<T: Real>(params: &ParamStore<T>) -> Result<BTreeSet<String>> {
    let flags = select_trainable_parameters(params)?;
    Ok(params
        .iter()
        .filter(|(id, _)| flags[id.0])
        .map(|(_, p)| p.name.clone())
        .collect())
}

/// Vocabulary plus a freshly initialized toy backbone with one placeholder
/// row per concept, seeded from its class name.
pub fn build_toy_model<T: Real>(
    manifest: &DatasetManifest,
    template: &PromptTemplate,
    toy: ToyConfig,
    schedule: NoiseSchedule,
    init: ClassInit,
    extra_prompts: &[String],
) -> Result<(Vocab, ToyBackbone<T>)> {
    crate::data::validate_concepts(&manifest.concepts)?;
    let prompts = manifest
        .records
        .iter()
        .map(|r| r.prompt.as_str())
        .chain(extra_prompts.iter().map(String::as_str))
        .chain([template.prefix.as_str(), template.joiner.as_str()]);
    let mut vocab = Vocab::build(&manifest.concepts, prompts);
    let mut model = ToyBackbone::new(toy, vocab.len(), schedule)?;
    for c in &manifest.concepts {
        register_placeholder(&mut vocab, &mut model, c.concept_id, &c.placeholder, &c.class_name, init)?;
    }
    Ok((vocab, model))
}

/// Manifest plus every record decoded at `manifest.image_size`.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub manifest: DatasetManifest,
    pub loaded: Vec<LoadedRecord>,
    pub template: PromptTemplate,
    pub policy: PlacementPolicy,
}

impl TrainData {
    fn pool(&self, cid: ConceptId, reference: bool) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                if reference {
                    r.kind.is_reference() && r.masks.contains_key(&cid)
                } else {
                    !r.kind.is_reference() && prior_concepts(&self.manifest, r).contains(&cid)
                }
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn has_priors(&self) -> bool {
        self.manifest.records.iter().any(|r| !r.kind.is_reference())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub image: Image,
    /// Masks at image resolution.
    pub masks: BTreeMap<ConceptId, Mask>,
    pub concept_ids: Vec<ConceptId>,
    pub prompt: String,
    pub tokens: TokenizedPrompt,
    pub kind: SampleKind,
    /// Whether this slot was composed on the fly.
    pub fused: bool,
}

/// `batch_size` reference slots followed by at most one prior slot. Every
/// draw comes from the `(seed, step, slot)` streams, so the batch for a step
/// does not depend on anything sampled before it.
pub fn sample_training_batch(data: &TrainData, vocab: &Vocab, cfg: &TrainConfig, step: u64) -> Result<Vec<BatchItem>> {
    let concepts = &data.manifest.concepts;
    if concepts.is_empty() {
        return Err(Error::Schema("no concepts".into()));
    }
    let mut out = Vec::with_capacity(cfg.batch_size + 1);
    let slots = cfg.batch_size + usize::from(data.has_priors());
    for slot in 0..slots {
        let reference = slot < cfg.batch_size;
        let mut rng = stream_rng(cfg.seed, Stream::Batch, step, slot as u64);
        let fuse = rng.random::<f64>() < cfg.fuse_rate;
        let k = if fuse { cfg.fusion_k.min(concepts.len()) } else { 1 };
        let mut chosen: Vec<&ConceptSpec> = sample_indices(&mut rng, concepts.len(), k)
            .into_iter()
            .map(|i| &concepts[i])
            .collect();
        let mut picks = Vec::with_capacity(k);
        for c in &chosen {
            let pool = data.pool(c.concept_id, reference);
            if pool.is_empty() {
                return Err(Error::Schema(format!(
                    "concept {} has no {} records",
                    c.concept_id,
                    if reference { "reference" } else { "prior" }
                )));
            }
            picks.push(pool[rng.random_range(0..pool.len())]);
        }
        let item = if fuse {
            let cutouts = chosen
                .iter()
                .zip(&picks)
                .map(|(c, &ri)| cutout_from(&data.loaded[ri], c.concept_id))
                .collect::<Result<Vec<_>>>()?;
            let fseed = stream_rng(cfg.seed, Stream::Fusion, step, slot as u64).random::<u64>();
            let sample = compose_sample(&cutouts, data.manifest.image_size, &data.policy, fseed)
                .map_err(|e| e.context(format!("step {step} slot {slot}")))?;
            let prompt = render_prompt(&chosen, &data.template, reference);
            BatchItem {
                image: sample.image,
                masks: sample.masks,
                concept_ids: sample.concept_ids,
                tokens: tokenize(&prompt, vocab)?,
                prompt,
                kind: if reference {
                    SampleKind::AugmentedReference
                } else {
                    SampleKind::AugmentedPrior
                },
                fused: true,
            }
        } else {
            let ri = picks[0];
            let rec = &data.manifest.records[ri];
            let (image, masks) = data.loaded[ri].clone();
            if reference && masks.len() > 1 {
                chosen = masks.keys().filter_map(|&id| data.manifest.concept(id)).collect();
            }
            let prompt = if rec.prompt.trim().is_empty() {
                render_prompt(&chosen, &data.template, reference)
            } else {
                rec.prompt.clone()
            };
            BatchItem {
                image,
                concept_ids: chosen.iter().map(|c| c.concept_id).collect(),
                masks,
                tokens: tokenize(&prompt, vocab)?,
                prompt,
                kind: rec.kind,
                fused: false,
            }
        };
        out.push(item);
    }
    Ok(out)
}

/// Optimizer state and bookkeeping owned by the training loop. Parameters
/// live in the backbone; random streams are keyed by `(seed, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub trainable: Vec<bool>,
    pub optimizer: AdamW<T>,
    pub history: Vec<LossBreakdown>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &ParamStore<T>) -> Result<Self> {
        let trainable = select_trainable_parameters(params)?;
        Ok(TrainState {
            step: 0,
            optimizer: AdamW::new(params, &trainable),
            trainable,
            history: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Draws `t` and `ε` for one slot of one step.
pub fn draw_noise<T: Real>(seed: u64, step: u64, slot: usize, schedule: &NoiseSchedule, size: usize, channels: usize) -> (usize, LatentGrid<T>) {
    let mut rng = stream_rng(seed, Stream::Noise, step, slot as u64);
    let t = rng.random_range(0..schedule.steps());
    let mut eps = LatentGrid::zeros(size, channels);
    fill_normal(&mut rng, &mut eps.values, 1.0);
    (t, eps)
}

/// One optimizer step on `L_ref + μ·L_prior + γ·L_local`.
pub fn training_step<T: Real, B: DiffusionBackbone<T>>(
    model: &mut B,
    state: &mut TrainState<T>,
    batch: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let step = state.step;
    let n = model.latent_size();
    let c = model.latent_channels();
    let n_ref = batch.iter().filter(|b| b.kind.is_reference()).count();
    let n_prior = batch.len() - n_ref;
    let mut grads = Grads::zeros_like(model.params());
    let (mut l_ref, mut l_prior, mut l_local) = (0.0, 0.0, 0.0);
    let mut used_tokens = BTreeSet::new();

    for (slot, item) in batch.iter().enumerate() {
        let z0 = latent_from_image::<T>(&item.image, n)?;
        let (t, eps) = draw_noise::<T>(cfg.seed, step, slot, model.schedule(), n, c);
        let z_t = add_noise(&z0, t, &eps, model.schedule());
        let (out, tape) = model.forward_train(&z_t, t, &item.tokens.token_ids);
        used_tokens.extend(item.tokens.token_ids.iter().copied());
        if item.kind.is_reference() {
            let w = 1.0 / n_ref as f64;
            let (l, d_eps) = ldm_loss_grad(&eps.values, &out.eps_hat.values, w)?;
            l_ref += w * l;
            let small: BTreeMap<ConceptId, Mask> = item
                .masks
                .iter()
                .map(|(&id, m)| downsample_mask(m, out.attention.resolution).map(|d| (id, d)))
                .collect::<Result<_>>()?;
            let (ll, d_att) = localized_refinement_grad(&out.attention, &small, &item.tokens.concept_token_index, cfg.gamma * w)?;
            l_local += w * ll;
            let d_att = (cfg.gamma > 0.0).then_some(d_att);
            model.backward(&tape, &d_eps, d_att.as_deref(), &state.trainable, &mut grads);
        } else {
            let w = 1.0 / n_prior as f64;
            let (l, d_eps) = ldm_loss_grad(&eps.values, &out.eps_hat.values, cfg.mu * w)?;
            l_prior += w * l;
            model.backward(&tape, &d_eps, None, &state.trainable, &mut grads);
        }
    }

    let loss = total_loss(l_ref, l_prior, l_local, cfg.mu, cfg.gamma).map_err(|e| e.context(format!("step {step}")))?;
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {grad_norm}")).context(format!("step {step}")));
    }
    let active: Vec<bool>;
    let rows = match model.token_embedding() {
        Some((id, width)) => {
            let rows = model.params().param(id).shape[0];
            active = (0..rows as u32).map(|r| used_tokens.contains(&r)).collect();
            Some(RowMask {
                param: id,
                width,
                active: &active,
            })
        }
        None => None,
    };
    state.optimizer.step(&cfg.adamw(), model.params_mut(), &grads, rows);
    state.step += 1;
    state.history.push(loss);
    Ok(StepReport { step, loss, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleRecord;
    use alloc::vec;

    fn tiny_data() -> (TrainData, Vocab, ToyBackbone<f32>) {
        let concepts = vec![
            ConceptSpec {
                concept_id: 1,
                placeholder: "<s1>".into(),
                attributes: vec!["red".into()],
                class_name: "disc".into(),
                fine_class: None,
            },
            ConceptSpec {
                concept_id: 2,
                placeholder: "<s2>".into(),
                attributes: vec!["blue".into()],
                class_name: "square".into(),
                fine_class: None,
            },
        ];
        let mut records = Vec::new();
        let mut loaded = Vec::new();
        for (cid, colour) in [(1u32, [220u8, 30, 30]), (2, [30, 30, 220])] {
            for kind in [SampleKind::Reference, SampleKind::Prior] {
                let mut img = Image::filled(32, 32, [255, 255, 255]);
                let mut m = Mask::zeros(32, 32);
                for y in 8..24 {
                    for x in 8..24 {
                        img.pixel_mut(x, y).copy_from_slice(&colour);
                        m.set(x, y, true);
                    }
                }
                records.push(SampleRecord {
                    image_path: format!("{cid}.png"),
                    masks: BTreeMap::from([(cid, format!("{cid}_m.png"))]),
                    kind,
                    prompt: String::new(),
                });
                loaded.push((img, BTreeMap::from([(cid, m)])));
            }
        }
        let manifest = DatasetManifest {
            concepts,
            records,
            image_size: 32,
        };
        let toy = ToyConfig {
            latent_size: 8,
            width: 16,
            text_dim: 16,
            ..ToyConfig::default()
        };
        let (vocab, model) =
            build_toy_model(&manifest, &PromptTemplate::default(), toy, NoiseSchedule::standard(), ClassInit::FirstToken, &[]).unwrap();
        let data = TrainData {
            manifest,
            loaded,
            template: PromptTemplate::default(),
            policy: PlacementPolicy::default(),
        };
        (data, vocab, model)
    }

    #[test]
    fn selection_matches_tags() {
        let (_, _, model) = tiny_data();
        let names = trainable_names(model.params()).unwrap();
        assert!(names.contains("unet.down.0.cross_attn.to_q.weight"));
        assert!(names.contains("unet.up.1.cross_attn.to_v.weight"));
        assert!(names.contains("text_encoder.token_embedding"));
        assert!(!names.iter().any(|n| n.contains("conv") || n.contains("time_embed")));
        let mut bad = ParamStore::<f32>::new();
        bad.push("unet.mystery", vec![1], vec![0.0]);
        assert_eq!(select_trainable_parameters(&bad), Err(Error::UnknownTag("unet.mystery".into())));
    }

    #[test]
    fn batch_composition_follows_fuse_rate() {
        let (data, vocab, _) = tiny_data();
        let mut cfg = TrainConfig {
            fuse_rate: 0.0,
            ..TrainConfig::default()
        };
        for step in 0..10 {
            let b = sample_training_batch(&data, &vocab, &cfg, step).unwrap();
            assert_eq!(b.len(), 3);
            assert!(b[..2].iter().all(|i| i.kind == SampleKind::Reference && !i.fused && i.concept_ids.len() == 1));
            assert!(!b[2].kind.is_reference());
        }
        cfg.fuse_rate = 1.0;
        for step in 0..10 {
            let b = sample_training_batch(&data, &vocab, &cfg, step).unwrap();
            for item in &b[..2] {
                assert!(item.fused && item.concept_ids.len() == 2);
                assert!(item.prompt.contains("<s1>") && item.prompt.contains("<s2>") && item.prompt.contains(" and "));
                assert_eq!(item.tokens.concept_token_index.len(), 2);
            }
            assert!(!b[2].prompt.contains('<'));
        }
    }

    #[test]
    fn step_freezes_and_sparse_rows() {
        let (data, vocab, mut model) = tiny_data();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let before = model.params().clone();
        let mut state = TrainState::new(model.params()).unwrap();
        let batch = sample_training_batch(&data, &vocab, &cfg, 0).unwrap();
        let report = training_step(&mut model, &mut state, &batch, &cfg).unwrap();
        assert_eq!(report.step, 0);
        assert_eq!(state.step, 1);
        let r = report.loss;
        assert_eq!(r.total, r.l_ref + r.mu * r.l_prior + r.gamma * r.l_local);
        for (id, p) in model.params().iter() {
            let changed = p.data != before.get(id);
            if !state.trainable[id.0] {
                assert!(!changed, "{} changed", p.name);
            }
        }
        let (tok, dt) = model.token_embedding().unwrap();
        let unused = vocab.id("beach").unwrap() as usize;
        assert_eq!(&model.params().get(tok)[unused * dt..(unused + 1) * dt], &before.get(tok)[unused * dt..(unused + 1) * dt]);
    }
}
