#![allow(dead_code)]

use std::path::{Path, PathBuf};

use far::config::FarConfig;
use far::synth::{write_synthetic_dataset, SynthPaths, SynthSpec};

/// Synthetic dataset under `dir/data` plus a config pointing at it.
pub fn setup(dir: &Path) -> (SynthPaths, FarConfig, PathBuf) {
    let paths = write_synthetic_dataset(&dir.join("data"), &SynthSpec::default()).unwrap();
    let mut cfg = FarConfig::default();
    cfg.core_data.manifest = paths.train_manifest.to_string_lossy().into_owned();
    cfg.eval.manifest = Some(paths.eval_manifest.to_string_lossy().into_owned());
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (paths, cfg, cfg_path)
}
