//! Dataset model shared by every stage: concepts, sample records, manifests,
//! and mask binarization.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{Image, Mask};
use crate::prompting::BASE_WORDS;
use crate::{Error, Result};

pub type ConceptId = u32;

/// Identity of one personalized concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: ConceptId,
    /// Placeholder token, e.g. `<s1>`.
    pub placeholder: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_class: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Reference,
    Prior,
    AugmentedReference,
    AugmentedPrior,
}

impl SampleKind {
    /// Reference-side samples feed the denoising term on D_ref and the
    /// localization term; the rest feed the prior-preservation term.
    pub fn is_reference(self) -> bool {
        matches!(self, SampleKind::Reference | SampleKind::AugmentedReference)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Reference => "reference",
            SampleKind::Prior => "prior",
            SampleKind::AugmentedReference => "augmented_reference",
            SampleKind::AugmentedPrior => "augmented_prior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    #[serde(default)]
    pub masks: BTreeMap<ConceptId, String>,
    pub kind: SampleKind,
    #[serde(default)]
    pub prompt: String,
}

/// First line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub concepts: Vec<ConceptSpec>,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub concepts: Vec<ConceptSpec>,
    pub records: Vec<SampleRecord>,
    pub image_size: usize,
}

impl DatasetManifest {
    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            concepts: self.concepts.clone(),
            image_size: self.image_size,
        }
    }

    pub fn concept(&self, id: ConceptId) -> Option<&ConceptSpec> {
        self.concepts.iter().find(|c| c.concept_id == id)
    }

    /// Records of `kind` that carry a mask for `id`.
    pub fn records_for(&self, id: ConceptId, kind: SampleKind) -> impl Iterator<Item = (usize, &SampleRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.kind == kind && r.masks.contains_key(&id))
    }

    /// Checks every invariant that does not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        validate_concepts(&self.concepts)?;
        if self.image_size == 0 {
            return Err(Error::Schema("image_size must be positive".into()));
        }
        let ids: BTreeSet<_> = self.concepts.iter().map(|c| c.concept_id).collect();
        for (i, rec) in self.records.iter().enumerate() {
            for id in rec.masks.keys() {
                if !ids.contains(id) {
                    return Err(Error::Schema(format!(
                        "record {i} ({}) references unknown concept_id {id}",
                        rec.image_path
                    )));
                }
            }
            if rec.kind == SampleKind::Reference && rec.masks.is_empty() {
                return Err(Error::Schema(format!(
                    "reference record {i} ({}) has no masks",
                    rec.image_path
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_concepts(concepts: &[ConceptSpec]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut placeholders = BTreeSet::new();
    let mut words: BTreeSet<String> = BASE_WORDS.iter().map(|w| String::from(*w)).collect();
    for c in concepts {
        words.insert(c.class_name.to_lowercase());
        words.extend(c.attributes.iter().map(|a| a.to_lowercase()));
    }
    for c in concepts {
        if c.concept_id == 0 {
            return Err(Error::Schema("concept_id must be positive".into()));
        }
        if !ids.insert(c.concept_id) {
            return Err(Error::Schema(format!("duplicate concept_id {}", c.concept_id)));
        }
        if c.placeholder.is_empty() || c.placeholder.chars().any(char::is_whitespace) {
            return Err(Error::Schema(format!(
                "placeholder {:?} must be a single non-empty token",
                c.placeholder
            )));
        }
        if !placeholders.insert(c.placeholder.clone()) {
            return Err(Error::Schema(format!("duplicate placeholder {}", c.placeholder)));
        }
        if words.contains(&c.placeholder) || words.contains(&c.placeholder.to_lowercase()) {
            return Err(Error::Schema(format!(
                "placeholder {} collides with a vocabulary word",
                c.placeholder
            )));
        }
        if c.class_name.trim().is_empty() {
            return Err(Error::Schema(format!(
                "concept {} has an empty class_name",
                c.concept_id
            )));
        }
    }
    Ok(())
}

/// Threshold an 8-bit single-channel mask at 128.
pub fn binarize_mask(raw: &Image) -> Result<Mask> {
    if raw.channels != 1 {
        return Err(Error::Shape(format!(
            "mask must be single-channel, got {} channels",
            raw.channels
        )));
    }
    Ok(Mask {
        width: raw.width,
        height: raw.height,
        data: raw.data.iter().map(|&v| u8::from(v >= 128)).collect(),
    })
}

/// Loader preprocessing: center-crop to square, then resize to `size`.
pub fn preprocess_image(img: &Image, size: usize) -> Image {
    img.center_crop_square().resize_bilinear(size, size)
}

pub fn preprocess_mask(mask: &Mask, size: usize) -> Mask {
    mask.center_crop_square().resize_nearest(size, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gray(data: Vec<u8>) -> Image {
        let n = data.len();
        Image::new(n, 1, 1, data).unwrap()
    }

    #[test]
    fn binarize_zero_and_saturated() {
        assert!(binarize_mask(&gray(vec![0; 16])).unwrap().data.iter().all(|&v| v == 0));
        assert!(binarize_mask(&gray(vec![255; 16])).unwrap().data.iter().all(|&v| v == 1));
    }

    #[test]
    fn binarize_threshold_boundary() {
        assert_eq!(binarize_mask(&gray(vec![127, 128])).unwrap().data, vec![0, 1]);
    }

    #[test]
    fn binarize_rejects_rgb() {
        let rgb = Image::filled(2, 2, [1, 2, 3]);
        assert!(matches!(binarize_mask(&rgb), Err(Error::Shape(_))));
    }

    fn concept(id: u32, ph: &str) -> ConceptSpec {
        ConceptSpec {
            concept_id: id,
            placeholder: ph.into(),
            attributes: vec!["border".into(), "collie".into()],
            class_name: "dog".into(),
            fine_class: None,
        }
    }

    #[test]
    fn validation_catches_duplicates_and_unknown_ids() {
        let mut m = DatasetManifest {
            concepts: vec![concept(1, "<s1>"), concept(2, "<s2>")],
            records: vec![SampleRecord {
                image_path: "a.png".into(),
                masks: [(7, "m.png".into())].into_iter().collect(),
                kind: SampleKind::Reference,
                prompt: String::new(),
            }],
            image_size: 64,
        };
        assert!(matches!(m.validate(), Err(Error::Schema(_))));
        m.records[0].masks = [(1, "m.png".into())].into_iter().collect();
        m.validate().unwrap();
        m.concepts.push(concept(1, "<s3>"));
        assert!(matches!(m.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn placeholder_must_not_be_a_vocab_word() {
        assert!(validate_concepts(&[concept(1, "dog")]).is_err());
        assert!(validate_concepts(&[concept(1, "photo")]).is_err());
        let mut c = concept(1, "<s1>");
        c.class_name = " ".into();
        assert!(validate_concepts(&[c]).is_err());
    }

    #[test]
    fn reference_needs_a_mask_prior_does_not() {
        let mut m = DatasetManifest {
            concepts: vec![concept(1, "<s1>")],
            records: vec![SampleRecord {
                image_path: "p.png".into(),
                masks: BTreeMap::new(),
                kind: SampleKind::Prior,
                prompt: String::new(),
            }],
            image_size: 64,
        };
        m.validate().unwrap();
        m.records[0].kind = SampleKind::Reference;
        assert!(m.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn binarize_idempotent_after_rescale(bits in proptest::collection::vec(0u8..2, 1..64)) {
            let scaled: Vec<u8> = bits.iter().map(|b| b * 255).collect();
            let once = binarize_mask(&gray(scaled.clone())).unwrap();
            let again: Vec<u8> = once.data.iter().map(|b| b * 255).collect();
            let twice = binarize_mask(&gray(again)).unwrap();
            proptest::prop_assert_eq!(once, twice);
        }
    }
}
