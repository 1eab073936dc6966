//! The training loop: JSONL loss log, periodic checkpoints, resume.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use far_core::trainer::{build_toy_model, sample_training_batch, training_step, StepReport, TrainData, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::FarConfig;
use crate::error::{FarError, Result};
use crate::manifest::{load_manifest, load_records};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST: &str = "latest";

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    #[serde(flatten)]
    pub report: StepReport,
    /// Seconds since the run (or resumed segment) started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Reports of the steps run in this call.
    pub reports: Vec<StepReport>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.safetensors"))
}

/// Path recorded in `checkpoints/latest`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let name = std::fs::read_to_string(out_dir.join(CHECKPOINT_DIR).join(LATEST)).ok()?;
    let p = out_dir.join(CHECKPOINT_DIR).join(name.trim());
    p.is_file().then_some(p)
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| FarError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FarError::Schema {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn same_run(a: &FarConfig, b: &FarConfig) -> bool {
    let mut a = a.clone();
    a.trainer.max_steps = b.trainer.max_steps;
    a.eval = b.eval.clone();
    a == *b
}

/// Runs `cfg.trainer.max_steps` steps into `out_dir`. With `resume`, picks
/// up from `checkpoints/latest` when present; the config must match the
/// checkpoint's apart from `trainer.max_steps` and the eval section.
pub fn train(cfg: &FarConfig, out_dir: &Path, resume: bool, mut on_step: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(Path::new(&cfg.core_data.manifest))?;
    let loaded = load_records(&manifest)?;
    let data = TrainData {
        manifest,
        loaded,
        template: cfg.prompting.template(),
        policy: cfg.fusion.policy(),
    };
    let log_path = out_dir.join(LOG_FILE);
    std::fs::create_dir_all(out_dir).map_err(|e| FarError::io(out_dir, e))?;

    let mut ck = match latest_checkpoint(out_dir).filter(|_| resume) {
        Some(p) => {
            let mut ck = load_checkpoint(&p)?;
            if !same_run(&ck.config, cfg) {
                return Err(FarError::Config(format!(
                    "config differs from the one stored in {}",
                    p.display()
                )));
            }
            ck.config = cfg.clone();
            ck
        }
        None => {
            let (vocab, model) = build_toy_model::<f32>(
                &data.manifest,
                &data.template,
                cfg.model.toy(),
                cfg.model.schedule()?,
                cfg.prompting.class_init,
                &cfg.eval.prompts,
            )?;
            let state = TrainState::new(far_core::nn::DiffusionBackbone::params(&model))?;
            Checkpoint {
                model,
                vocab,
                config: cfg.clone(),
                state,
            }
        }
    };

    let mut kept = String::new();
    if ck.state.step > 0 && log_path.is_file() {
        for line in read_log(&log_path)?.into_iter().filter(|l| l.report.step < ck.state.step) {
            kept.push_str(&serde_json::to_string(&line).expect("log line serializes"));
            kept.push('\n');
        }
    }
    std::fs::write(&log_path, kept).map_err(|e| FarError::io(&log_path, e))?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| FarError::io(&log_path, e))?;

    let start = Instant::now();
    let tc = &cfg.trainer;
    let mut reports = Vec::new();
    let mut last = latest_checkpoint(out_dir).filter(|_| resume && ck.state.step > 0);
    while ck.state.step < tc.max_steps {
        let step = ck.state.step;
        let batch = sample_training_batch(&data, &ck.vocab, tc, step)?;
        let report = training_step(&mut ck.model, &mut ck.state, &batch, tc)?;
        let line = LogLine {
            report,
            wall_time: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&line).expect("log line serializes")).map_err(|e| FarError::io(&log_path, e))?;
        on_step(&report);
        reports.push(report);
        let done = ck.state.step;
        if (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) || done == tc.max_steps {
            let p = checkpoint_path(out_dir, done);
            save_checkpoint(&p, &ck)?;
            let pointer = out_dir.join(CHECKPOINT_DIR).join(LATEST);
            let name = p.file_name().expect("checkpoint file name").to_string_lossy().into_owned();
            std::fs::write(&pointer, name).map_err(|e| FarError::io(&pointer, e))?;
            last = Some(p);
        }
    }
    let checkpoint = match last {
        Some(p) => p,
        None => {
            let p = checkpoint_path(out_dir, ck.state.step);
            save_checkpoint(&p, &ck)?;
            p
        }
    };
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        reports,
    })
}
