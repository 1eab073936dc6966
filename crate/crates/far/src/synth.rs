//! A tiny two-concept shapes dataset for smoke runs and desk-scale ablations.
//!
//! Concept 1 (`<s1>`, "red ball") is a red disc with a yellow centre spot;
//! concept 2 (`<s2>`, "blue box") is a blue square with a dark checker
//! pattern. Priors are plain discs and squares in other colours. The eval
//! manifest holds held-out two-subject scenes with one mask per concept.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use far_core::data::{ConceptId, ConceptSpec, DatasetManifest, SampleKind, SampleRecord};
use far_core::image::{Image, Mask};
use far_core::prompting::{render_prompt, PromptTemplate};
use far_core::rng::seeded;
use rand::Rng;

use crate::error::Result;
use crate::manifest::write_manifest;
use crate::png::{write_image, write_mask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub references_per_concept: usize,
    pub priors_per_concept: usize,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            references_per_concept: 5,
            priors_per_concept: 5,
            eval_scenes: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

pub fn synth_concepts() -> Vec<ConceptSpec> {
    vec![
        ConceptSpec {
            concept_id: 1,
            placeholder: "<s1>".into(),
            attributes: vec!["red".into()],
            class_name: "ball".into(),
            fine_class: None,
        },
        ConceptSpec {
            concept_id: 2,
            placeholder: "<s2>".into(),
            attributes: vec!["blue".into()],
            class_name: "box".into(),
            fine_class: None,
        },
    ]
}

#[derive(Debug, Clone, Copy)]
enum Look {
    Subject,
    Prior([u8; 3]),
}

/// Paints shape `cid` with centre `(cx, cy)` and half-size `r`, returning its
/// footprint. Later paints overwrite earlier ones.
fn paint(img: &mut Image, cid: ConceptId, look: Look, cx: f64, cy: f64, r: f64) -> Mask {
    let n = img.width;
    let mut m = Mask::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match cid {
                1 => dx * dx + dy * dy <= r * r,
                _ => dx.abs() <= r && dy.abs() <= r,
            };
            if !inside {
                continue;
            }
            let px = match (cid, look) {
                (_, Look::Prior(c)) => c,
                (1, Look::Subject) if dx * dx + dy * dy <= (r / 3.0) * (r / 3.0) => [250, 220, 40],
                (1, Look::Subject) => [215, 35, 35],
                (_, Look::Subject) => {
                    let cell = ((dx + r) / (r / 2.0)) as i64 + ((dy + r) / (r / 2.0)) as i64;
                    if cell % 2 == 0 {
                        [40, 70, 225]
                    } else {
                        [15, 20, 90]
                    }
                }
            };
            img.pixel_mut(x, y).copy_from_slice(&px);
            m.set(x, y, true);
        }
    }
    m
}

fn place(rng: &mut impl Rng, n: usize) -> (f64, f64, f64) {
    let n = n as f64;
    let r = rng.random_range(0.16 * n..0.26 * n);
    let cx = rng.random_range(r..n - r);
    let cy = rng.random_range(r..n - r);
    (cx, cy, r)
}

const PRIOR_COLOURS: [[u8; 3]; 4] = [[60, 170, 60], [150, 150, 150], [240, 150, 30], [160, 60, 170]];

/// Writes images, masks and both manifests under `dir`.
pub fn write_synthetic_dataset(dir: &Path, spec: &SynthSpec) -> Result<SynthPaths> {
    let n = spec.image_size;
    let concepts = synth_concepts();
    let template = PromptTemplate::default();
    let mut rng = seeded(spec.seed);
    let mut train = Vec::new();
    let emit = |name: String, img: &Image, masks: Vec<(ConceptId, Mask)>, kind, prompt: String| -> Result<SampleRecord> {
        let image_path = dir.join(format!("{name}.png"));
        write_image(&image_path, img)?;
        let mut paths = BTreeMap::new();
        for (cid, m) in masks {
            let p = dir.join(format!("{name}_mask{cid}.png"));
            write_mask(&p, &m)?;
            paths.insert(cid, p.to_string_lossy().into_owned());
        }
        Ok(SampleRecord {
            image_path: image_path.to_string_lossy().into_owned(),
            masks: paths,
            kind,
            prompt,
        })
    };
    for c in &concepts {
        let cid = c.concept_id;
        for i in 0..spec.references_per_concept {
            let mut img = Image::filled(n, n, [255, 255, 255]);
            let (cx, cy, r) = place(&mut rng, n);
            let m = paint(&mut img, cid, Look::Subject, cx, cy, r);
            let prompt = render_prompt(&[c], &template, true);
            train.push(emit(format!("ref_c{cid}_{i}"), &img, vec![(cid, m)], SampleKind::Reference, prompt)?);
        }
        for i in 0..spec.priors_per_concept {
            let mut img = Image::filled(n, n, [255, 255, 255]);
            let (cx, cy, r) = place(&mut rng, n);
            let colour = PRIOR_COLOURS[rng.random_range(0..PRIOR_COLOURS.len())];
            let m = paint(&mut img, cid, Look::Prior(colour), cx, cy, r);
            let prompt = format!("{} {}", template.prefix, c.class_name);
            train.push(emit(format!("prior_c{cid}_{i}"), &img, vec![(cid, m)], SampleKind::Prior, prompt)?);
        }
    }
    let mut eval = Vec::new();
    let refs: Vec<&ConceptSpec> = concepts.iter().collect();
    let pair_prompt = render_prompt(&refs, &template, true);
    let mut i = 0;
    while eval.len() < spec.eval_scenes {
        let mut img = Image::filled(n, n, [255, 255, 255]);
        let order: [usize; 2] = if rng.random::<bool>() { [0, 1] } else { [1, 0] };
        let mut masks: Vec<(ConceptId, Mask)> = Vec::new();
        for &k in &order {
            let cid = concepts[k].concept_id;
            let (cx, cy, r) = place(&mut rng, n);
            let m = paint(&mut img, cid, Look::Subject, cx, cy, r);
            for (_, earlier) in masks.iter_mut() {
                for (e, &v) in earlier.data.iter_mut().zip(&m.data) {
                    *e &= 1 - v;
                }
            }
            masks.push((cid, m));
        }
        i += 1;
        if masks.iter().any(|(_, m)| m.count() * 10 < n * n / 2) {
            continue;
        }
        eval.push(emit(format!("eval_{i}"), &img, masks, SampleKind::Reference, pair_prompt.clone())?);
    }
    let train_manifest = dir.join("manifest.jsonl");
    let eval_manifest = dir.join("eval_manifest.jsonl");
    write_manifest(
        &train_manifest,
        &DatasetManifest {
            concepts: concepts.clone(),
            records: train,
            image_size: n,
        },
    )?;
    write_manifest(
        &eval_manifest,
        &DatasetManifest {
            concepts,
            records: eval,
            image_size: n,
        },
    )?;
    Ok(SynthPaths {
        train_manifest,
        eval_manifest,
    })
}
