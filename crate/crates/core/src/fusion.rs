//! Concept Fusion: cut subjects out along their masks and recombine them at
//! random positions and scales on a plain canvas.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptId, DatasetManifest, SampleKind, SampleRecord};
use crate::image::{Image, Mask};
use crate::prompting::{render_prompt, PromptTemplate};
use crate::rng::seeded;
use crate::{Error, Result};

/// A subject's tight bounding-box patch and its alpha.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectCutout {
    pub pixels: Image,
    pub alpha: Mask,
    pub source_concept_id: ConceptId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementPolicy {
    /// Resize factor range applied to the cutout.
    pub scale_range: [f64; 2],
    pub max_retries: u32,
    pub background: [u8; 3],
    pub allow_overlap: bool,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy {
            scale_range: [0.4, 0.8],
            max_retries: 20,
            background: [255, 255, 255],
            allow_overlap: true,
        }
    }
}

impl PlacementPolicy {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::BadPolicy(format!("scale_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Where one subject landed: top-left corner and resized extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub concept_id: ConceptId,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Placement {
    /// Source-cutout pixel feeding canvas pixel `(x, y)` (nearest rule).
    pub fn source_pixel(&self, cutout: &SubjectCutout, x: usize, y: usize) -> (usize, usize) {
        let (lx, ly) = (x - self.x, y - self.y);
        let sx = ((lx * 2 + 1) * cutout.alpha.width / (self.width * 2)).min(cutout.alpha.width - 1);
        let sy = ((ly * 2 + 1) * cutout.alpha.height / (self.height * 2)).min(cutout.alpha.height - 1);
        (sx, sy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedSample {
    pub image: Image,
    pub masks: BTreeMap<ConceptId, Mask>,
    pub concept_ids: Vec<ConceptId>,
    pub prompt: String,
    pub kind: SampleKind,
    pub placements: Vec<Placement>,
}

/// Crops `image` to the tight bounding box of `mask`.
pub fn extract_cutout(image: &Image, mask: &Mask, concept_id: ConceptId) -> Result<SubjectCutout> {
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::Shape(format!(
            "image is {}x{}, mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let (x0, y0, w, h) = mask.bbox().ok_or(Error::EmptyMask { concept_id })?;
    Ok(SubjectCutout {
        pixels: image.crop(x0, y0, w, h),
        alpha: mask.crop(x0, y0, w, h),
        source_concept_id: concept_id,
    })
}

fn overlaps(a: &Placement, b: &Placement) -> bool {
    a.x < b.x + b.width && b.x < a.x + a.width && a.y < b.y + b.height && b.y < a.y + a.height
}

fn place<R: Rng>(cutout: &SubjectCutout, canvas: usize, policy: &PlacementPolicy, rng: &mut R) -> Placement {
    let [lo, hi] = policy.scale_range;
    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (cw, ch) = (cutout.alpha.width as f64, cutout.alpha.height as f64);
    let fit = (canvas as f64 / cw).min(canvas as f64 / ch);
    let s = s.min(fit);
    let width = (Float::round(cw * s) as usize).clamp(1, canvas);
    let height = (Float::round(ch * s) as usize).clamp(1, canvas);
    let x = rng.random_range(0..=canvas - width);
    let y = rng.random_range(0..=canvas - height);
    Placement {
        concept_id: cutout.source_concept_id,
        x,
        y,
        width,
        height,
    }
}

/// Pastes `cutouts` in list order (later on top) onto a `canvas_size` square.
/// The returned sample has an empty prompt and kind `AugmentedReference`.
pub fn compose_sample(cutouts: &[SubjectCutout], canvas_size: usize, policy: &PlacementPolicy, seed: u64) -> Result<FusedSample> {
    policy.validate()?;
    if cutouts.is_empty() || canvas_size == 0 {
        return Err(Error::BadPolicy("need at least one cutout and a non-empty canvas".into()));
    }
    for (i, c) in cutouts.iter().enumerate() {
        if c.alpha.is_empty() {
            return Err(Error::EmptyMask {
                concept_id: c.source_concept_id,
            });
        }
        if cutouts[..i].iter().any(|o| o.source_concept_id == c.source_concept_id) {
            return Err(Error::BadPolicy(format!("concept {} appears twice", c.source_concept_id)));
        }
    }
    let min_visible = (canvas_size * canvas_size).div_ceil(100);
    let mut rng = seeded(seed);
    for _ in 0..=policy.max_retries {
        let placements: Vec<Placement> = cutouts.iter().map(|c| place(c, canvas_size, policy, &mut rng)).collect();
        if !policy.allow_overlap
            && placements
                .iter()
                .enumerate()
                .any(|(i, a)| placements[..i].iter().any(|b| overlaps(a, b)))
        {
            continue;
        }
        let sample = paint(cutouts, &placements, canvas_size, policy.background);
        if sample.masks.values().all(|m| m.count() >= min_visible) {
            return Ok(sample);
        }
    }
    Err(Error::RetryExhausted {
        retries: policy.max_retries,
    })
}

fn paint(cutouts: &[SubjectCutout], placements: &[Placement], canvas: usize, background: [u8; 3]) -> FusedSample {
    let mut image = Image::filled(canvas, canvas, background);
    let mut masks: BTreeMap<ConceptId, Mask> = BTreeMap::new();
    for (c, p) in cutouts.iter().zip(placements) {
        let pixels = c.pixels.resize_bilinear(p.width, p.height);
        let alpha = c.alpha.resize_nearest(p.width, p.height);
        let mut mine = Mask::zeros(canvas, canvas);
        for ly in 0..p.height {
            for lx in 0..p.width {
                if !alpha.get(lx, ly) {
                    continue;
                }
                let (x, y) = (p.x + lx, p.y + ly);
                image.pixel_mut(x, y).copy_from_slice(&pixels.pixel(lx, ly)[..3]);
                for m in masks.values_mut() {
                    m.set(x, y, false);
                }
                mine.set(x, y, true);
            }
        }
        masks.insert(c.source_concept_id, mine);
    }
    FusedSample {
        image,
        masks,
        concept_ids: cutouts.iter().map(|c| c.source_concept_id).collect(),
        prompt: String::new(),
        kind: SampleKind::AugmentedReference,
        placements: placements.to_vec(),
    }
}

/// Decoded record: image plus per-concept binary masks at manifest size.
pub type LoadedRecord = (Image, BTreeMap<ConceptId, Mask>);

/// Concepts a prior record stands in for: its mask keys, or else concepts
/// whose class name appears in its prompt.
pub fn prior_concepts(manifest: &DatasetManifest, rec: &SampleRecord) -> Vec<ConceptId> {
    if !rec.masks.is_empty() {
        return rec.masks.keys().copied().collect();
    }
    let words: Vec<String> = rec.prompt.split_whitespace().map(|w| w.to_lowercase()).collect();
    manifest
        .concepts
        .iter()
        .filter(|c| words.iter().any(|w| *w == c.class_name.to_lowercase()))
        .map(|c| c.concept_id)
        .collect()
}

/// Cutout of `cid` from a decoded record; whole-image alpha when the record
/// carries no mask for it.
pub fn cutout_from(loaded: &LoadedRecord, cid: ConceptId) -> Result<SubjectCutout> {
    let (image, masks) = loaded;
    match masks.get(&cid) {
        Some(m) => extract_cutout(image, m, cid),
        None => extract_cutout(image, &Mask::ones(image.width, image.height), cid),
    }
}

/// Label used in output file names: concept ids joined by `-`.
pub fn combo_label(ids: &[ConceptId]) -> String {
    ids.iter().map(|i| format!("{i}")).collect::<Vec<_>>().join("-")
}

/// Concept subsets to fuse: each single concept, then each unordered pair.
pub fn combos(manifest: &DatasetManifest) -> Vec<Vec<ConceptId>> {
    let ids: Vec<ConceptId> = manifest.concepts.iter().map(|c| c.concept_id).collect();
    let mut out: Vec<Vec<ConceptId>> = ids.iter().map(|&i| alloc::vec![i]).collect();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            out.push(alloc::vec![a, b]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSets {
    /// `(combo label, index within combo, sample)`.
    pub references: Vec<(String, usize, FusedSample)>,
    pub priors: Vec<(String, usize, FusedSample)>,
}

/// Offline augmentation: `pairs_per_combo` samples for every single concept
/// and every concept pair, from references and (when present) priors.
/// Sample `i` in emission order uses seed `seed ^ i`.
pub fn build_augmented_sets<F>(
    manifest: &DatasetManifest,
    mut load: F,
    policy: &PlacementPolicy,
    template: &PromptTemplate,
    pairs_per_combo: usize,
    seed: u64,
) -> Result<AugmentedSets>
where
    F: FnMut(usize, &SampleRecord) -> Result<LoadedRecord>,
{
    manifest.validate()?;
    policy.validate()?;
    let mut refs_of: BTreeMap<ConceptId, Vec<usize>> = BTreeMap::new();
    let mut priors_of: BTreeMap<ConceptId, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        match r.kind {
            SampleKind::Reference => r.masks.keys().for_each(|&c| refs_of.entry(c).or_default().push(i)),
            SampleKind::Prior => prior_concepts(manifest, r)
                .into_iter()
                .for_each(|c| priors_of.entry(c).or_default().push(i)),
            _ => {}
        }
    }
    for c in &manifest.concepts {
        if !refs_of.contains_key(&c.concept_id) {
            return Err(Error::Schema(format!("concept {} has no reference records", c.concept_id)));
        }
    }
    let have_priors = manifest.concepts.iter().all(|c| priors_of.contains_key(&c.concept_id));
    let mut cache: BTreeMap<usize, LoadedRecord> = BTreeMap::new();
    let mut counter = 0u64;
    let mut out = AugmentedSets {
        references: Vec::new(),
        priors: Vec::new(),
    };
    let sides: &[(SampleKind, &BTreeMap<ConceptId, Vec<usize>>)] = if have_priors {
        &[(SampleKind::AugmentedReference, &refs_of), (SampleKind::AugmentedPrior, &priors_of)]
    } else {
        &[(SampleKind::AugmentedReference, &refs_of)]
    };
    for &(kind, pool) in sides {
        for combo in combos(manifest) {
            let label = combo_label(&combo);
            let specs: Vec<_> = combo.iter().map(|&c| manifest.concept(c).expect("validated")).collect();
            for index in 0..pairs_per_combo {
                let sample_seed = seed ^ counter;
                counter += 1;
                let provenance = || format!("{} {label} #{index}", kind.as_str());
                let mut rng = seeded(sample_seed);
                let mut cutouts = Vec::with_capacity(combo.len());
                for &cid in &combo {
                    let candidates = &pool[&cid];
                    let ri = candidates[rng.random_range(0..candidates.len())];
                    if !cache.contains_key(&ri) {
                        let loaded = load(ri, &manifest.records[ri]).map_err(|e| e.context(provenance()))?;
                        cache.insert(ri, loaded);
                    }
                    cutouts.push(cutout_from(&cache[&ri], cid).map_err(|e| e.context(provenance()))?);
                }
                let mut sample =
                    compose_sample(&cutouts, manifest.image_size, policy, sample_seed).map_err(|e| e.context(provenance()))?;
                sample.kind = kind;
                sample.prompt = render_prompt(&specs, template, kind == SampleKind::AugmentedReference);
                match kind {
                    SampleKind::AugmentedReference => out.references.push((label.clone(), index, sample)),
                    _ => out.priors.push((label.clone(), index, sample)),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn square_cutout(id: ConceptId, side: usize, shade: u8) -> SubjectCutout {
        let mut pixels = Image::filled(side, side, [0, 0, 0]);
        for y in 0..side {
            for x in 0..side {
                pixels.pixel_mut(x, y).copy_from_slice(&[shade, (x * 3) as u8, (y * 3) as u8]);
            }
        }
        SubjectCutout {
            pixels,
            alpha: Mask::ones(side, side),
            source_concept_id: id,
        }
    }

    #[test]
    fn cutout_is_tight_bbox() {
        let img = Image::filled(256, 256, [1, 2, 3]);
        let mut m = Mask::zeros(256, 256);
        for y in 10..=20 {
            for x in 30..=50 {
                m.set(x, y, true);
            }
        }
        let c = extract_cutout(&img, &m, 1).unwrap();
        assert_eq!((c.pixels.height, c.pixels.width), (11, 21));
        assert_eq!(c.alpha.count(), 11 * 21);
        let full = extract_cutout(&img, &Mask::ones(256, 256), 1).unwrap();
        assert_eq!(full.pixels, img);
        assert_eq!(extract_cutout(&img, &Mask::zeros(256, 256), 4), Err(Error::EmptyMask { concept_id: 4 }));
    }

    #[test]
    fn unit_scale_is_pure_translation() {
        let c = square_cutout(1, 64, 9);
        let policy = PlacementPolicy {
            scale_range: [1.0, 1.0],
            ..Default::default()
        };
        let s = compose_sample(core::slice::from_ref(&c), 256, &policy, 5).unwrap();
        let p = s.placements[0];
        assert_eq!((p.width, p.height), (64, 64));
        for r in 0..64 {
            for col in 0..64 {
                assert_eq!(s.image.pixel(p.x + col, p.y + r), c.pixels.pixel(col, r));
            }
        }
        assert_eq!(s.masks[&1].count(), 64 * 64);
        assert_eq!(s.masks[&1].bbox(), Some((p.x, p.y, 64, 64)));
    }

    #[test]
    fn later_subject_occludes_earlier() {
        let policy = PlacementPolicy {
            scale_range: [1.0, 1.0],
            ..Default::default()
        };
        // Both fill the whole canvas, so their placements coincide.
        let a = square_cutout(1, 32, 10);
        let b = SubjectCutout {
            alpha: Mask::from_bits(32, 32, &(0..1024).map(|i| (i % 32 < 16) as u8).collect::<Vec<_>>()).unwrap(),
            ..square_cutout(2, 32, 200)
        };
        let s = compose_sample(&[a, b], 32, &policy, 1).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(s.masks[&2].get(x, y), x < 16);
                assert_eq!(s.masks[&1].get(x, y), x >= 16);
            }
        }
    }

    #[test]
    fn rejects_bad_policy_and_exhausts() {
        let c = square_cutout(1, 8, 0);
        let bad = PlacementPolicy {
            scale_range: [0.9, 0.2],
            ..Default::default()
        };
        assert!(matches!(compose_sample(core::slice::from_ref(&c), 64, &bad, 0), Err(Error::BadPolicy(_))));
        let tiny = PlacementPolicy {
            scale_range: [0.1, 0.1],
            max_retries: 3,
            ..Default::default()
        };
        // A 1x1 subject on a 64x64 canvas covers < 1%.
        assert_eq!(
            compose_sample(core::slice::from_ref(&c), 64, &tiny, 0),
            Err(Error::RetryExhausted { retries: 3 })
        );
    }

    #[test]
    fn combos_singles_then_pairs() {
        let concept = |id| crate::data::ConceptSpec {
            concept_id: id,
            placeholder: format!("<s{id}>"),
            attributes: vec![],
            class_name: "thing".into(),
            fine_class: None,
        };
        let m = DatasetManifest {
            concepts: vec![concept(1), concept(2), concept(3)],
            records: vec![],
            image_size: 8,
        };
        assert_eq!(combos(&m), vec![vec![1], vec![2], vec![3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }
}
