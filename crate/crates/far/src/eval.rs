//! Evaluation: sample sweeps, attention-localization probes, metric plugins.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use far_core::eval::{probe_concept_iou, IouAggregator};
use far_core::nn::DiffusionBackbone;
use far_core::prompting::render_prompt;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::{FarConfig, PluginSpec};
use crate::error::{FarError, Result};
use crate::generate::{generate, tokenize_checked, SampleOptions};
use crate::manifest::{load_manifest, load_records};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by concept id.
    pub per_concept_iou: BTreeMap<String, f64>,
    /// Keyed by combination label such as `"1-2"`.
    pub per_pair_iou: BTreeMap<String, f64>,
    pub sample_paths: Vec<String>,
    pub config_echo: FarConfig,
    pub metric_plugin_results: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn mean_concept_iou(&self) -> f64 {
        far_core::eval::mean(&self.per_concept_iou.values().copied().collect::<Vec<_>>())
    }

    pub fn mean_pair_iou(&self) -> f64 {
        far_core::eval::mean(&self.per_pair_iou.values().copied().collect::<Vec<_>>())
    }
}

/// Probes every masked record of `manifest_path` once at timestep `t`;
/// record `i` draws its noise with seed `seed + i`.
pub fn probe_manifest(ck: &Checkpoint, manifest_path: &Path, t: usize, seed: u64) -> Result<IouAggregator> {
    let manifest = load_manifest(manifest_path)?;
    let loaded = load_records(&manifest)?;
    let template = ck.config.prompting.template();
    let mut agg = IouAggregator::default();
    for (i, (rec, (image, masks))) in manifest.records.iter().zip(&loaded).enumerate() {
        if masks.is_empty() {
            continue;
        }
        let prompt = if rec.prompt.trim().is_empty() {
            let specs: Vec<_> = masks.keys().filter_map(|&c| manifest.concept(c)).collect();
            render_prompt(&specs, &template, true)
        } else {
            rec.prompt.clone()
        };
        let tokens = tokenize_checked(&prompt, &ck.vocab)?;
        let sample = probe_concept_iou(&ck.model, image, masks, &tokens, t, seed.wrapping_add(i as u64))
            .map_err(|e| e.context(rec.image_path.clone()))?;
        agg.add(&sample);
    }
    Ok(agg)
}

#[derive(Debug, Serialize)]
struct PluginJob<'a> {
    images: &'a [String],
    prompt: &'a str,
    references: &'a [String],
}

#[derive(Debug, Deserialize)]
struct PluginAnswer {
    score: f64,
}

fn run_plugin(spec: &PluginSpec, job: &PluginJob<'_>) -> Result<f64> {
    let fail = |message: String| FarError::Plugin {
        name: spec.name.clone(),
        message,
    };
    let (exe, args) = spec.command.split_first().ok_or_else(|| fail("empty command".into()))?;
    let mut child = Command::new(exe)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| fail(e.to_string()))?;
    let body = serde_json::to_vec(job).expect("plugin job serializes");
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(&body)
        .map_err(|e| fail(e.to_string()))?;
    let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
    if !out.status.success() {
        return Err(fail(format!("exited with {}", out.status)));
    }
    let answer: PluginAnswer = serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("bad output: {e}")))?;
    if !answer.score.is_finite() {
        return Err(fail("non-finite score".into()));
    }
    Ok(answer.score)
}

/// Generates `cfg.eval.prompts × cfg.eval.seeds` images under
/// `<out_dir>/samples`, probes attention on `cfg.eval.manifest` (if set),
/// scores each prompt's images with every plugin (mean over prompts), and
/// writes `<out_dir>/report.json`.
pub fn evaluate_run(checkpoint: &Path, cfg: &FarConfig, out_dir: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let ev = &cfg.eval;
    let opts = SampleOptions {
        ddim_steps: ev.ddim_steps,
        image_size: ev.image_size.unwrap_or(ck.config.model.latent_size * 4),
    };
    let mut sample_paths = Vec::new();
    let mut by_prompt: Vec<(String, Vec<String>)> = Vec::new();
    for (i, prompt) in ev.prompts.iter().enumerate() {
        let paths = generate(&ck, prompt, &ev.seeds, opts, &out_dir.join("samples"), &format!("p{i}"))?;
        let paths: Vec<String> = paths.iter().map(|p| p.to_string_lossy().into_owned()).collect();
        sample_paths.extend(paths.iter().cloned());
        by_prompt.push((prompt.clone(), paths));
    }

    let mut agg = IouAggregator::default();
    if let Some(m) = &ev.manifest {
        let t = ev.probe_t.unwrap_or(ck.model.schedule().steps() / 2);
        agg = probe_manifest(&ck, Path::new(m), t, ev.probe_seed)?;
    }

    let mut metric_plugin_results = BTreeMap::new();
    if !ev.plugins.is_empty() {
        let references = reference_images(&ck.config)?;
        for spec in &ev.plugins {
            let mut scores = Vec::new();
            for (prompt, images) in &by_prompt {
                let job = PluginJob {
                    images,
                    prompt,
                    references: &references,
                };
                scores.push(run_plugin(spec, &job)?);
            }
            metric_plugin_results.insert(spec.name.clone(), far_core::eval::mean(&scores));
        }
    }

    let report = EvalReport {
        per_concept_iou: agg.concept_means().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        per_pair_iou: agg.pair_means(),
        sample_paths,
        config_echo: cfg.clone(),
        metric_plugin_results,
    };
    write_report(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn reference_images(cfg: &FarConfig) -> Result<Vec<String>> {
    let m = load_manifest(Path::new(&cfg.core_data.manifest))?;
    Ok(m.records
        .iter()
        .filter(|r| r.kind == far_core::data::SampleKind::Reference)
        .map(|r| r.image_path.clone())
        .collect())
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| FarError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| FarError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| FarError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FarError::Schema {
        path: PathBuf::from(path),
        message: e.to_string(),
    })
}
