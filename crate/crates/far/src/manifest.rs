//! JSONL dataset manifests and record decoding.
//!
//! Line 1 is a [`ManifestHeader`]; every following non-blank line is a
//! [`SampleRecord`]. Relative paths are resolved against the manifest's
//! directory when loading and written relative to it when saving.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use far_core::data::{binarize_mask, preprocess_image, preprocess_mask, DatasetManifest, ManifestHeader, SampleRecord};
use far_core::fusion::LoadedRecord;

use crate::error::{FarError, Result};
use crate::png::{read_raw_mask, read_rgb};

fn resolve(base: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() {
        p.to_string()
    } else {
        base.join(path).to_string_lossy().into_owned()
    }
}

/// Parses, resolves paths, validates, and checks that every referenced file
/// exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| FarError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let schema = |line: usize, message: String| FarError::Schema {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| schema(1, "empty manifest".into()))?;
    let header: ManifestHeader = serde_json::from_str(header).map_err(|e| schema(hl + 1, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let mut rec: SampleRecord = serde_json::from_str(line).map_err(|e| schema(i + 1, e.to_string()))?;
        rec.image_path = resolve(base, &rec.image_path);
        for m in rec.masks.values_mut() {
            *m = resolve(base, m);
        }
        records.push(rec);
    }
    let manifest = DatasetManifest {
        concepts: header.concepts,
        records,
        image_size: header.image_size,
    };
    manifest.validate()?;
    for rec in &manifest.records {
        for p in std::iter::once(&rec.image_path).chain(rec.masks.values()) {
            if !Path::new(p).is_file() {
                return Err(FarError::MissingFile(PathBuf::from(p)));
            }
        }
    }
    Ok(manifest)
}

fn relative(base: &Path, p: &str) -> String {
    match Path::new(p).strip_prefix(base) {
        Ok(r) => r.to_string_lossy().into_owned(),
        Err(_) => p.to_string(),
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    writeln!(out, "{}", to_line(&manifest.header())).expect("write to Vec");
    for rec in &manifest.records {
        let mut rec = rec.clone();
        rec.image_path = relative(base, &rec.image_path);
        for m in rec.masks.values_mut() {
            *m = relative(base, m);
        }
        writeln!(out, "{}", to_line(&rec)).expect("write to Vec");
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| FarError::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| FarError::io(path, e))
}

fn to_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("manifest types serialize")
}

/// Decodes one record: RGB image and binarized masks, both center-cropped and
/// resized to `size`.
pub fn load_record(rec: &SampleRecord, size: usize) -> Result<LoadedRecord> {
    let raw = read_rgb(Path::new(&rec.image_path))?;
    let image = preprocess_image(&raw, size);
    let mut masks = BTreeMap::new();
    for (&cid, mpath) in &rec.masks {
        let mp = Path::new(mpath);
        let raw_mask = read_raw_mask(mp)?;
        let bin = binarize_mask(&raw_mask).map_err(|e| e.context(mpath.clone()))?;
        if bin.width != raw.width || bin.height != raw.height {
            return Err(far_core::Error::Shape(format!(
                "mask is {}x{} but its image {} is {}x{}",
                bin.width, bin.height, rec.image_path, raw.width, raw.height
            ))
            .context(mpath.clone())
            .into());
        }
        masks.insert(cid, preprocess_mask(&bin, size));
    }
    Ok((image, masks))
}

pub fn load_records(manifest: &DatasetManifest) -> Result<Vec<LoadedRecord>> {
    manifest.records.iter().map(|r| load_record(r, manifest.image_size)).collect()
}
