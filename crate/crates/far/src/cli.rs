//! `far {augment|train|generate|evaluate}` argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::augment::augment;
use crate::checkpoint::load_checkpoint;
use crate::config::{load_config, with_overrides, FarConfig};
use crate::error::{FarError, Result};
use crate::eval::evaluate_run;
use crate::generate::{generate, SampleOptions};
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "far", version, about = "Multi-concept personalization fine-tuning on a toy diffusion backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write offline fused samples and an extended manifest.
    Augment(CommonArgs),
    /// Fine-tune; resumes from `<out>/checkpoints/latest` when present.
    Train(CommonArgs),
    /// Sample images for one prompt.
    Generate(CommonArgs),
    /// Sample sweeps, attention IoU probes and metric plugins.
    Evaluate(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config; omitted sections take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `trainer.max_steps=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_name = "CSV")]
    pub seeds: Option<String>,
    #[arg(long, default_value = "far-out")]
    pub out: PathBuf,
}

fn parse_seeds(csv: &str) -> Result<Vec<u64>> {
    csv.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| FarError::Config(format!("--seeds: {s:?} is not a non-negative integer")))
        })
        .collect()
}

fn config_from(args: &CommonArgs) -> Result<FarConfig> {
    match &args.config {
        Some(p) => load_config(p, &args.overrides),
        None => with_overrides(&FarConfig::default(), &args.overrides),
    }
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| FarError::Config(format!("{flag} is required")))
}

fn paths(v: &[PathBuf]) -> Vec<String> {
    v.iter().map(|p| p.to_string_lossy().into_owned()).collect()
}

/// Runs one subcommand and returns its JSON summary for stdout.
pub fn dispatch(command: &Command) -> Result<serde_json::Value> {
    match command {
        Command::Augment(a) => {
            let cfg = config_from(a)?;
            let o = augment(&cfg, &a.out)?;
            Ok(json!({
                "manifest": o.manifest,
                "augmented_references": o.references,
                "augmented_priors": o.priors,
            }))
        }
        Command::Train(a) => {
            let cfg = config_from(a)?;
            let o = train(&cfg, &a.out, true, |_| {})?;
            Ok(json!({
                "checkpoint": o.checkpoint,
                "log": o.log,
                "steps_run": o.reports.len(),
                "last": o.reports.last(),
            }))
        }
        Command::Generate(a) => {
            let ck = load_checkpoint(need(&a.checkpoint, "--checkpoint")?)?;
            let cfg = match &a.config {
                Some(p) => load_config(p, &a.overrides)?,
                None => with_overrides(&ck.config, &a.overrides)?,
            };
            let prompt = need(&a.prompt, "--prompt")?;
            let seeds = match &a.seeds {
                Some(s) => parse_seeds(s)?,
                None => cfg.eval.seeds.clone(),
            };
            let opts = SampleOptions {
                ddim_steps: cfg.eval.ddim_steps,
                image_size: cfg.eval.image_size.unwrap_or(ck.config.model.latent_size * 4),
            };
            let written = generate(&ck, prompt, &seeds, opts, &a.out, "sample")?;
            Ok(json!({ "images": paths(&written) }))
        }
        Command::Evaluate(a) => {
            let ckp = need(&a.checkpoint, "--checkpoint")?;
            let mut cfg = match &a.config {
                Some(p) => load_config(p, &a.overrides)?,
                None => with_overrides(&load_checkpoint(ckp)?.config, &a.overrides)?,
            };
            if let Some(p) = &a.prompt {
                cfg.eval.prompts = vec![p.clone()];
            }
            if let Some(s) = &a.seeds {
                cfg.eval.seeds = parse_seeds(s)?;
            }
            let report = evaluate_run(ckp, &cfg, &a.out)?;
            Ok(json!({
                "report": a.out.join(crate::eval::REPORT_FILE),
                "per_concept_iou": report.per_concept_iou,
                "per_pair_iou": report.per_pair_iou,
                "samples": report.sample_paths.len(),
            }))
        }
    }
}

/// Single-line diagnostic written to stderr on failure.
pub fn diagnostic(err: &FarError) -> serde_json::Value {
    json!({
        "error": err.kind(),
        "message": err.to_string(),
        "path": err.path().map(Path::to_path_buf),
        "exit_code": err.exit_code(),
    })
}

/// Parses `argv`, runs the command, prints the outcome and returns the
/// process exit code (0 ok, 1 validation error, 2 runtime error).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "UsageError", "message": first, "path": null, "exit_code": 1 }));
            return 1;
        }
    };
    match dispatch(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            e.exit_code()
        }
    }
}
