//! Prompt rendering, the whitespace vocabulary, and placeholder tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ConceptId, ConceptSpec};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MAX_TOKENS: usize = 32;

/// Words every vocabulary starts with, so evaluation prompts have something
/// to land on besides the manifest's own words.
pub const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "picture", "of", "and", "with", "on", "in", "at", "near", "next",
    "to", "beach", "grass", "table", "street", "snow", "floor", "room", "park", "sitting",
    "standing", "together", "two", "background", "white", "simple",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix: String,
    pub joiner: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            prefix: "A photo of a".into(),
            joiner: "and".into(),
        }
    }
}

/// Renders `"<prefix> [S1] [attributes] [class] <joiner> [S2] ..."`.
///
/// Prior prompts pass `with_placeholders = false` and keep only the
/// descriptive class.
pub fn render_prompt(concepts: &[&ConceptSpec], template: &PromptTemplate, with_placeholders: bool) -> String {
    let mut out = template.prefix.trim().to_string();
    for (i, c) in concepts.iter().enumerate() {
        if i > 0 {
            out.push(' ');
            out.push_str(template.joiner.trim());
        }
        if with_placeholders {
            out.push(' ');
            out.push_str(&c.placeholder);
        }
        for a in &c.attributes {
            out.push(' ');
            out.push_str(a);
        }
        out.push(' ');
        out.push_str(&c.class_name);
    }
    out
}

/// How a placeholder embedding is seeded from a (possibly multi-word) class name.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassInit {
    #[default]
    FirstToken,
    MeanOfTokens,
}

/// Append-only token table. Frozen (by convention) once training starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabFile", try_from = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    placeholders: BTreeMap<String, ConceptId>,
}

/// On-disk vocabulary: `token -> id` plus the placeholder registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: BTreeMap<String, u32>,
    #[serde(default)]
    pub placeholders: BTreeMap<String, ConceptId>,
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.ids,
            placeholders: v.placeholders,
        }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        let mut tokens = alloc::vec![String::new(); f.tokens.len()];
        for (tok, &id) in &f.tokens {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Schema(format!("token id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(Error::Schema(format!("token id {id} assigned twice")));
            }
            *slot = tok.clone();
        }
        for p in f.placeholders.keys() {
            if !f.tokens.contains_key(p) {
                return Err(Error::Schema(format!("placeholder {p} missing from tokens")));
            }
        }
        Ok(Vocab {
            tokens,
            ids: f.tokens,
            placeholders: f.placeholders,
        })
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: BTreeMap::new(),
            placeholders: BTreeMap::new(),
        };
        v.add_word(PAD);
        v.add_word(UNK);
        for w in BASE_WORDS {
            v.add_word(w);
        }
        v
    }

    /// Base words plus every attribute, class and fine-class word of `concepts`
    /// and the words of `prompts`. Placeholders are not added here.
    pub fn build<'a>(concepts: &[ConceptSpec], prompts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        let is_placeholder = |w: &str| concepts.iter().any(|c| c.placeholder == w);
        for c in concepts {
            for a in &c.attributes {
                v.add_text(a);
            }
            v.add_text(&c.class_name);
            if let Some(f) = &c.fine_class {
                v.add_text(f);
            }
        }
        for p in prompts {
            for w in p.split_whitespace().filter(|w| !is_placeholder(w)) {
                v.add_text(w);
            }
        }
        v
    }

    fn add_text(&mut self, text: &str) {
        for w in text.split_whitespace() {
            let w = normalize(w);
            if !w.is_empty() {
                self.add_word(&w);
            }
        }
    }

    /// Adds a word if missing, returning its id.
    pub fn add_word(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn placeholders(&self) -> &BTreeMap<String, ConceptId> {
        &self.placeholders
    }

    /// Token ids of a plain-word string, unknown words mapped to `<unk>`.
    pub fn word_ids(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(&normalize(w)).unwrap_or(UNK_ID))
            .collect()
    }
}

fn normalize(word: &str) -> String {
    word.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    /// Always `MAX_TOKENS` long, padded with `PAD_ID`.
    pub token_ids: Vec<u32>,
    /// Number of real tokens before padding.
    pub len: usize,
    pub concept_token_index: BTreeMap<ConceptId, usize>,
}

/// Whitespace tokenization; placeholders match verbatim, other words are
/// lowercased with surrounding punctuation stripped.
pub fn tokenize(prompt: &str, vocab: &Vocab) -> Result<TokenizedPrompt> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if words.len() > MAX_TOKENS {
        return Err(Error::PromptTooLong {
            len: words.len(),
            max: MAX_TOKENS,
        });
    }
    let mut token_ids = Vec::with_capacity(MAX_TOKENS);
    let mut concept_token_index = BTreeMap::new();
    for (pos, w) in words.iter().enumerate() {
        if let Some(&cid) = vocab.placeholders.get(*w) {
            token_ids.push(vocab.id(w).expect("registered placeholder has an id"));
            concept_token_index.entry(cid).or_insert(pos);
        } else {
            token_ids.push(vocab.id(&normalize(w)).unwrap_or(UNK_ID));
        }
    }
    let len = token_ids.len();
    token_ids.resize(MAX_TOKENS, PAD_ID);
    Ok(TokenizedPrompt {
        token_ids,
        len,
        concept_token_index,
    })
}

/// Storage for token embeddings that can grow by copying initial rows.
pub trait EmbeddingTable {
    /// Appends a row equal to the mean of `sources` and returns its index.
    fn push_row_from(&mut self, sources: &[usize]) -> usize;
}

/// Adds `placeholder` to the vocabulary and seeds its embedding from the
/// class-name embedding.
pub fn register_placeholder<E: EmbeddingTable + ?Sized>(
    vocab: &mut Vocab,
    table: &mut E,
    concept_id: ConceptId,
    placeholder: &str,
    class_name: &str,
    init: ClassInit,
) -> Result<u32> {
    if vocab.id(placeholder).is_some() || vocab.placeholders.contains_key(placeholder) {
        return Err(Error::DuplicateToken(placeholder.to_string()));
    }
    let known: Vec<usize> = vocab
        .word_ids(class_name)
        .into_iter()
        .filter(|&id| id != UNK_ID)
        .map(|id| id as usize)
        .collect();
    let sources = match (init, known.first()) {
        (_, None) => return Err(Error::UnknownClass(class_name.to_string())),
        (ClassInit::FirstToken, Some(&first)) => alloc::vec![first],
        (ClassInit::MeanOfTokens, Some(_)) => known,
    };
    let id = vocab.add_word(placeholder);
    vocab.placeholders.insert(placeholder.to_string(), concept_id);
    let row = table.push_row_from(&sources);
    if row != id as usize {
        return Err(Error::Schema(format!(
            "embedding table has {} rows but vocabulary assigned id {id}",
            row
        )));
    }
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn dog() -> ConceptSpec {
        ConceptSpec {
            concept_id: 1,
            placeholder: "<s1>".into(),
            attributes: vec!["border".into(), "collie".into()],
            class_name: "dog".into(),
            fine_class: Some("border collie".into()),
        }
    }

    fn backpack() -> ConceptSpec {
        ConceptSpec {
            concept_id: 2,
            placeholder: "<s2>".into(),
            attributes: vec!["pink".into(), "backpack".into()],
            class_name: "backpack".into(),
            fine_class: None,
        }
    }

    struct Rows(Vec<Vec<f32>>);
    impl EmbeddingTable for Rows {
        fn push_row_from(&mut self, sources: &[usize]) -> usize {
            let dim = self.0[0].len();
            let mut row = vec![0.0; dim];
            for &s in sources {
                for (r, v) in row.iter_mut().zip(&self.0[s]) {
                    *r += *v / sources.len() as f32;
                }
            }
            self.0.push(row);
            self.0.len() - 1
        }
    }

    fn table_for(v: &Vocab) -> Rows {
        Rows((0..v.len()).map(|i| vec![i as f32, 1.0 + i as f32 * 0.5, -(i as f32)]).collect())
    }

    #[test]
    fn renders_single_concept_with_and_without_placeholder() {
        let t = PromptTemplate::default();
        assert_eq!(render_prompt(&[&dog()], &t, true), "A photo of a <s1> border collie dog");
        assert_eq!(render_prompt(&[&dog()], &t, false), "A photo of a border collie dog");
    }

    #[test]
    fn renders_pair_with_single_joiner() {
        let s = render_prompt(&[&dog(), &backpack()], &PromptTemplate::default(), true);
        assert_eq!(s, "A photo of a <s1> border collie dog and <s2> pink backpack backpack");
        assert_eq!(s.matches(" and ").count(), 1);
    }

    fn vocab_with_placeholders() -> (Vocab, Rows) {
        let concepts = [dog(), backpack()];
        let mut v = Vocab::build(&concepts, []);
        let mut t = table_for(&v);
        for c in &concepts {
            register_placeholder(&mut v, &mut t, c.concept_id, &c.placeholder, &c.class_name, ClassInit::FirstToken)
                .unwrap();
        }
        (v, t)
    }

    #[test]
    fn tokenize_positions() {
        let (v, _) = vocab_with_placeholders();
        let tp = tokenize("A photo of a <s1> dog", &v).unwrap();
        assert_eq!(tp.len, 6);
        assert_eq!(tp.token_ids.len(), MAX_TOKENS);
        assert_eq!(tp.concept_token_index[&1], 4);
        assert_eq!(tp.token_ids[4], v.id("<s1>").unwrap());
        assert!(tp.token_ids[6..].iter().all(|&t| t == PAD_ID));
    }

    #[test]
    fn tokenize_empty() {
        let (v, _) = vocab_with_placeholders();
        let tp = tokenize("", &v).unwrap();
        assert_eq!(tp.len, 0);
        assert!(tp.concept_token_index.is_empty());
    }

    #[test]
    fn tokenize_two_placeholders_distinct_positions() {
        let (v, _) = vocab_with_placeholders();
        let tp = tokenize("a <s1> dog and <s2> backpack", &v).unwrap();
        assert_eq!(tp.concept_token_index.len(), 2);
        assert_ne!(tp.concept_token_index[&1], tp.concept_token_index[&2]);
    }

    #[test]
    fn tokenize_too_long() {
        let (v, _) = vocab_with_placeholders();
        let long = "a ".repeat(MAX_TOKENS + 1);
        assert!(matches!(tokenize(&long, &v), Err(Error::PromptTooLong { .. })));
    }

    #[test]
    fn placeholder_copies_class_embedding() {
        let concepts = [dog()];
        let mut v = Vocab::build(&concepts, []);
        let mut t = table_for(&v);
        let id = register_placeholder(&mut v, &mut t, 1, "<s1>", "dog", ClassInit::FirstToken).unwrap();
        let dog_id = v.id("dog").unwrap() as usize;
        assert_eq!(t.0[id as usize], t.0[dog_id]);
        assert!(matches!(
            register_placeholder(&mut v, &mut t, 1, "<s1>", "dog", ClassInit::FirstToken),
            Err(Error::DuplicateToken(_))
        ));
        assert!(matches!(
            register_placeholder(&mut v, &mut t, 3, "<s3>", "zebra", ClassInit::FirstToken),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn multi_word_class_uses_first_or_mean() {
        let concepts = [dog()];
        let mut v = Vocab::build(&concepts, []);
        let mut t = table_for(&v);
        let a = register_placeholder(&mut v, &mut t, 1, "<a>", "border collie", ClassInit::FirstToken).unwrap();
        assert_eq!(t.0[a as usize], t.0[v.id("border").unwrap() as usize]);
        let b = register_placeholder(&mut v, &mut t, 2, "<b>", "border collie", ClassInit::MeanOfTokens).unwrap();
        let (x, y) = (v.id("border").unwrap() as usize, v.id("collie").unwrap() as usize);
        assert_eq!(t.0[b as usize][0], (t.0[x][0] + t.0[y][0]) / 2.0);
    }

    proptest::proptest! {
        #[test]
        fn rendered_prompts_round_trip_placeholders(
            attrs1 in proptest::collection::vec("[a-z]{1,6}", 0..3),
            attrs2 in proptest::collection::vec("[a-z]{1,6}", 0..3),
            pair in proptest::bool::ANY,
        ) {
            let mut c1 = dog();
            c1.attributes = attrs1;
            let mut c2 = backpack();
            c2.attributes = attrs2;
            let concepts = [c1.clone(), c2.clone()];
            let mut v = Vocab::build(&concepts, []);
            let mut t = table_for(&v);
            for c in &concepts {
                register_placeholder(&mut v, &mut t, c.concept_id, &c.placeholder, &c.class_name, ClassInit::FirstToken).unwrap();
            }
            let chosen: Vec<&ConceptSpec> = if pair { vec![&c1, &c2] } else { vec![&c2] };
            let p = render_prompt(&chosen, &PromptTemplate::default(), true);
            let tp = tokenize(&p, &v).unwrap();
            let found: Vec<u32> = tp.concept_token_index.keys().copied().collect();
            let mut want: Vec<u32> = chosen.iter().map(|c| c.concept_id).collect();
            want.sort();
            proptest::prop_assert_eq!(found, want);
            let unplaced = render_prompt(&chosen, &PromptTemplate::default(), false);
            proptest::prop_assert!(tokenize(&unplaced, &v).unwrap().concept_token_index.is_empty());
        }
    }
}
