//! One JSON config with a section per stage, plus dotted `--set` overrides.

use std::path::{Path, PathBuf};

use far_core::fusion::PlacementPolicy;
use far_core::nn::{NoiseSchedule, ToyConfig};
use far_core::prompting::{ClassInit, PromptTemplate};
use far_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FarError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreDataSection {
    /// Training manifest (JSONL).
    pub manifest: String,
}

impl Default for CoreDataSection {
    fn default() -> Self {
        CoreDataSection {
            manifest: "data/manifest.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub scale_range: [f64; 2],
    pub max_retries: u32,
    pub background: [u8; 3],
    pub allow_overlap: bool,
    /// Offline samples per single concept and per concept pair.
    pub pairs_per_combo: usize,
    pub seed: u64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let p = PlacementPolicy::default();
        FusionSection {
            scale_range: p.scale_range,
            max_retries: p.max_retries,
            background: p.background,
            allow_overlap: p.allow_overlap,
            pairs_per_combo: 3,
            seed: 42,
        }
    }
}

impl FusionSection {
    pub fn policy(&self) -> PlacementPolicy {
        PlacementPolicy {
            scale_range: self.scale_range,
            max_retries: self.max_retries,
            background: self.background,
            allow_overlap: self.allow_overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptingSection {
    pub prefix: String,
    pub joiner: String,
    pub class_init: ClassInit,
}

impl Default for PromptingSection {
    fn default() -> Self {
        let t = PromptTemplate::default();
        PromptingSection {
            prefix: t.prefix,
            joiner: t.joiner,
            class_init: ClassInit::FirstToken,
        }
    }
}

impl PromptingSection {
    pub fn template(&self) -> PromptTemplate {
        PromptTemplate {
            prefix: self.prefix.clone(),
            joiner: self.joiner.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_size: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub init_seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ToyConfig::default();
        ModelSection {
            latent_size: t.latent_size,
            latent_channels: t.latent_channels,
            width: t.width,
            heads: t.heads,
            text_dim: t.text_dim,
            init_seed: t.init_seed,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ModelSection {
    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            latent_size: self.latent_size,
            latent_channels: self.latent_channels,
            width: self.width,
            heads: self.heads,
            text_dim: self.text_dim,
            max_tokens: far_core::prompting::MAX_TOKENS,
            init_seed: self.init_seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?)
    }
}

/// External metric executable: receives a JSON job on stdin, prints
/// `{"score": number}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSpec {
    pub name: String,
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Manifest of held-out samples with masks for the attention probe.
    pub manifest: Option<String>,
    pub prompts: Vec<String>,
    pub seeds: Vec<u64>,
    pub ddim_steps: usize,
    /// Probe timestep; `null` means half the schedule length.
    pub probe_t: Option<usize>,
    pub probe_seed: u64,
    /// Side of generated PNGs; `null` means four times the latent size.
    pub image_size: Option<usize>,
    pub plugins: Vec<PluginSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            manifest: None,
            prompts: Vec::new(),
            seeds: vec![42],
            ddim_steps: 50,
            probe_t: None,
            probe_seed: 42,
            image_size: None,
            plugins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarConfig {
    pub core_data: CoreDataSection,
    pub fusion: FusionSection,
    pub prompting: PromptingSection,
    pub model: ModelSection,
    pub trainer: TrainConfig,
    pub eval: EvalSection,
}

impl FarConfig {
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.fusion.policy().validate()?;
        self.model.schedule()?;
        if self.eval.ddim_steps == 0 {
            return Err(FarError::Config("eval.ddim_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut String| {
            if !p.is_empty() && Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        };
        fix(&mut self.core_data.manifest);
        if let Some(m) = self.eval.manifest.as_mut() {
            fix(m);
        }
    }
}

/// Applies `key.path=value` to a JSON tree. The key must already exist;
/// values parse as JSON, falling back to a plain string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FarError::Config(format!("override {assignment:?} is not key=value")))?;
    let mut node = &mut *tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| FarError::Config(format!("unknown config key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub fn with_overrides(cfg: &FarConfig, overrides: &[String]) -> Result<FarConfig> {
    let mut tree = serde_json::to_value(cfg).expect("config serializes");
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let out: FarConfig = serde_json::from_value(tree).map_err(|e| FarError::Config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

/// Reads a config file (missing sections take defaults), resolves its
/// relative paths against the file's directory and applies overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<FarConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FarError::io(path, e))?;
    let mut cfg: FarConfig = serde_json::from_str(&text).map_err(|e| FarError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let cfg_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    cfg.resolve_paths(&cfg_dir);
    with_overrides(&cfg, overrides)
}
