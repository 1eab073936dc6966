//! Deterministic DDIM sampling from a checkpoint to PNG files.

use std::path::{Path, PathBuf};

use far_core::nn::backbone::image_from_latent;
use far_core::nn::{ddim_sample, DiffusionBackbone};
use far_core::prompting::{tokenize, TokenizedPrompt, Vocab};

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::png::write_image;

/// Tokenizes `prompt`, rejecting `<...>` words that are not registered
/// placeholders.
pub fn tokenize_checked(prompt: &str, vocab: &Vocab) -> Result<TokenizedPrompt> {
    for w in prompt.split_whitespace() {
        let looks_like = w.starts_with('<') && w.ends_with('>') && w.len() > 2;
        if looks_like && !vocab.placeholders().contains_key(w) {
            return Err(far_core::Error::UnknownPlaceholder(w.to_string()).into());
        }
    }
    Ok(tokenize(prompt, vocab)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub ddim_steps: usize,
    /// Side of the written PNGs.
    pub image_size: usize,
}

/// One image per seed, written as `<out_dir>/<stem>_seed<seed>.png`.
pub fn generate(ck: &Checkpoint, prompt: &str, seeds: &[u64], opts: SampleOptions, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let tokens = tokenize_checked(prompt, &ck.vocab)?;
    let model = &ck.model;
    let text = model.encode_text(&tokens.token_ids);
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let z = ddim_sample(
            model,
            &text,
            opts.ddim_steps,
            seed,
            model.schedule(),
            model.latent_size(),
            model.latent_channels(),
        )?;
        if !z.is_finite() {
            return Err(far_core::Error::NonFinite(format!("sampled latent for seed {seed}")).into());
        }
        let path = out_dir.join(format!("{stem}_seed{seed}.png"));
        write_image(&path, &image_from_latent(&z, opts.image_size))?;
        out.push(path);
    }
    Ok(out)
}
