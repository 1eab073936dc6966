//! Offline Concept Fusion: writes composites and an extended manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use far_core::data::SampleRecord;
use far_core::fusion::{build_augmented_sets, FusedSample};

use crate::config::FarConfig;
use crate::error::Result;
use crate::manifest::{load_manifest, load_records, write_manifest};
use crate::png::{write_image, write_mask};

pub const AUGMENTED_MANIFEST: &str = "augmented_manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub manifest: PathBuf,
    pub references: usize,
    pub priors: usize,
}

fn write_sample(dir: &Path, label: &str, index: usize, s: &FusedSample) -> Result<SampleRecord> {
    let stem = format!("{}_{label}_{index}", s.kind.as_str());
    let image_path = dir.join(format!("{stem}.png"));
    write_image(&image_path, &s.image)?;
    let mut masks = BTreeMap::new();
    for (&cid, m) in &s.masks {
        let p = dir.join(format!("{stem}_mask{cid}.png"));
        write_mask(&p, m)?;
        masks.insert(cid, p.to_string_lossy().into_owned());
    }
    Ok(SampleRecord {
        image_path: image_path.to_string_lossy().into_owned(),
        masks,
        kind: s.kind,
        prompt: s.prompt.clone(),
    })
}

/// Reads `cfg.core_data.manifest`, composes `pairs_per_combo` samples per
/// single concept and per pair, and writes them with the original records to
/// `<out_dir>/augmented_manifest.jsonl`.
pub fn augment(cfg: &FarConfig, out_dir: &Path) -> Result<AugmentOutcome> {
    let manifest = load_manifest(Path::new(&cfg.core_data.manifest))?;
    let loaded = load_records(&manifest)?;
    let sets = build_augmented_sets(
        &manifest,
        |i, _| Ok(loaded[i].clone()),
        &cfg.fusion.policy(),
        &cfg.prompting.template(),
        cfg.fusion.pairs_per_combo,
        cfg.fusion.seed,
    )?;
    let mut out = manifest.clone();
    for (label, index, s) in sets.references.iter().chain(&sets.priors) {
        out.records.push(write_sample(out_dir, label, *index, s)?);
    }
    let path = out_dir.join(AUGMENTED_MANIFEST);
    write_manifest(&path, &out)?;
    Ok(AugmentOutcome {
        manifest: path,
        references: sets.references.len(),
        priors: sets.priors.len(),
    })
}
