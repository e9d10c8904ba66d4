//! Merging the pair branch and the entity branch into extractions.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::docmodel::{Document, Vocabulary, KEY_LABEL, OTHER_LABEL};
use crate::error::{Error, Result};
use crate::heads::{MatchMatrix, Span, TagScheme};
use crate::params::uniform;

pub const UNKNOWN_CATEGORY: &str = "unknown";
pub const QUESTION_LABEL: &str = "question";
pub const ANSWER_LABEL: &str = "answer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperMode {
    Lookup,
    Semantic,
}

/// How categories are named in the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    /// Values carry field categories chosen by the key mapper.
    Categorical,
    /// Matched keys are `question`, matched values `answer`.
    Funsd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub threshold: f64,
    pub mapper: MapperMode,
    pub label_scheme: LabelScheme,
    pub semantic_hidden: usize,
    pub semantic_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            mapper: MapperMode::Lookup,
            label_scheme: LabelScheme::Categorical,
            semantic_hidden: 32,
            semantic_seed: 17,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("inference.threshold", "must lie in (0, 1)"));
        }
        if self.semantic_hidden == 0 {
            return Err(Error::config("inference.semantic_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// A directed key → value candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub key: usize,
    pub value: usize,
    pub confidence: f64,
}

/// Pairs with `p′ > threshold`; each value keeps its most probable key
/// (lower id on ties), then pairs whose key is itself a kept value are
/// dropped. Sorted by `(key, value)`.
pub fn match_pairs(probs: &MatchMatrix, threshold: f64) -> Result<Vec<MatchedPair>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside (0, 1)")));
    }
    let n = probs.n();
    let mut best: Vec<Option<MatchedPair>> = vec![None; n];
    for (value, slot) in best.iter_mut().enumerate() {
        for key in 0..n {
            let p = probs.probs[[key, value]];
            if key == value || p <= threshold {
                continue;
            }
            if slot.is_none_or(|b| p > b.confidence) {
                *slot = Some(MatchedPair { key, value, confidence: p });
            }
        }
    }
    let values: BTreeSet<usize> = best.iter().flatten().map(|p| p.value).collect();
    let mut pairs: Vec<MatchedPair> = best
        .into_iter()
        .flatten()
        .filter(|p| !values.contains(&p.key))
        .collect();
    pairs.sort_by_key(|p| (p.key, p.value));
    Ok(pairs)
}

/// Lowercase alphanumerics only: `"Total (RM)"` → `"totalrm"`.
pub fn normalize_key(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Category → normalized key phrases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl LookupTable {
    /// Collects the key text of every annotated link under the value's label.
    pub fn from_documents(docs: &[Document]) -> Self {
        let mut sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for doc in docs {
            for link in doc.links() {
                let value = &doc.segments[link.value];
                if value.label == OTHER_LABEL || value.label == KEY_LABEL {
                    continue;
                }
                let phrase = normalize_key(&doc.segments[link.key].text);
                if !phrase.is_empty() {
                    sets.entry(value.label.clone()).or_default().insert(phrase);
                }
            }
        }
        Self {
            entries: sets
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        }
    }

    pub fn insert(&mut self, category: &str, phrase: &str) {
        let list = self.entries.entry(category.to_string()).or_default();
        let p = normalize_key(phrase);
        if !list.contains(&p) {
            list.push(p);
            list.sort();
        }
    }
}

/// Exact normalized match against the table, else `"unknown"`. When a
/// phrase is listed under several categories the first in name order wins.
pub fn map_key_lookup(key_text: &str, table: &LookupTable) -> String {
    let key = normalize_key(key_text);
    table
        .entries
        .iter()
        .find(|(_, phrases)| phrases.iter().any(|p| *p == key))
        .map_or_else(|| UNKNOWN_CATEGORY.to_string(), |(c, _)| c.clone())
}

/// Fixed-length text representation.
pub trait TextEncoder {
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Category whose encoding is nearest to the key in L2; first on ties.
pub fn map_key_semantic(key_text: &str, categories: &[String], encoder: &dyn TextEncoder) -> Result<String> {
    if categories.is_empty() {
        return Err(Error::InvalidInput("semantic mapping needs at least one category".into()));
    }
    let key = encoder.encode(key_text);
    let mut best = (f64::INFINITY, 0);
    for (idx, cat) in categories.iter().enumerate() {
        let c = encoder.encode(cat);
        let d: f64 = key
            .iter()
            .zip(&c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d < best.0 {
            best = (d, idx);
        }
    }
    Ok(categories[best.1].clone())
}

/// Words split on whitespace and underscores.
fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|w| !w.is_empty())
}

#[derive(Debug, Clone)]
struct LstmCell {
    /// `[4h, d + h]`, gate order input, forget, candidate, output.
    w: Array2<f64>,
    b: Array1<f64>,
}

impl LstmCell {
    fn new(rng: &mut ChaCha8Rng, d: usize, h: usize) -> Self {
        let limit = 1.0 / (h as f64).sqrt();
        Self {
            w: uniform(rng, 4 * h, d + h, limit),
            b: uniform(rng, 1, 4 * h, limit).row(0).to_owned(),
        }
    }

    fn run<'a>(&self, inputs: impl Iterator<Item = ndarray::ArrayView1<'a, f64>>) -> Array1<f64> {
        let h = self.b.len() / 4;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hs = Array1::zeros(h);
        let mut cs = Array1::<f64>::zeros(h);
        for x in inputs {
            let xh = ndarray::concatenate![ndarray::Axis(0), x, hs.view()];
            let z = self.w.dot(&xh) + &self.b;
            for k in 0..h {
                let (i, f, g, o) = (sig(z[k]), sig(z[h + k]), z[2 * h + k].tanh(), sig(z[3 * h + k]));
                cs[k] = f * cs[k] + i * g;
                hs[k] = o * cs[k].tanh();
            }
        }
        hs
    }
}

/// Bidirectional LSTM over token embeddings with frozen seeded weights; the
/// representation is the final forward state followed by the final
/// backward state.
#[derive(Debug, Clone)]
pub struct BiLstmEncoder {
    vocab: Vocabulary,
    embeddings: Array2<f64>,
    forward: LstmCell,
    backward: LstmCell,
}

impl BiLstmEncoder {
    pub fn new(vocab: Vocabulary, embeddings: Array2<f64>, hidden: usize, seed: u64) -> Result<Self> {
        if embeddings.nrows() != vocab.len() {
            return Err(Error::shape("BiLstmEncoder", vocab.len(), embeddings.nrows()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = embeddings.ncols();
        let forward = LstmCell::new(&mut rng, d, hidden);
        let backward = LstmCell::new(&mut rng, d, hidden);
        Ok(Self {
            vocab,
            embeddings,
            forward,
            backward,
        })
    }
}

impl TextEncoder for BiLstmEncoder {
    fn encode(&self, text: &str) -> Vec<f64> {
        let ids: Vec<usize> = words(text).map(|w| self.vocab.id(w)).collect();
        let rows = |i: &usize| self.embeddings.row(*i);
        let f = self.forward.run(ids.iter().map(rows));
        let b = self.backward.run(ids.iter().rev().map(rows));
        f.iter().chain(b.iter()).copied().collect()
    }
}

pub enum CategoryMapper {
    Lookup(LookupTable),
    Semantic {
        categories: Vec<String>,
        encoder: Box<dyn TextEncoder>,
    },
}

impl CategoryMapper {
    pub fn map(&self, key_text: &str) -> Result<String> {
        match self {
            CategoryMapper::Lookup(table) => Ok(map_key_lookup(key_text, table)),
            CategoryMapper::Semantic { categories, encoder } => {
                map_key_semantic(key_text, categories, encoder.as_ref())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExtraction {
    pub key: usize,
    pub value: usize,
    pub category: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandaloneExtraction {
    pub segment_id: usize,
    pub category: String,
    /// Token spans local to the segment, category names resolved.
    pub spans: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionResult {
    pub pairs: Vec<PairExtraction>,
    pub standalone: Vec<StandaloneExtraction>,
    pub unassigned: Vec<usize>,
}

/// Category of the span covering most tokens; earlier spans win ties.
pub fn dominant_category(spans: &[Span], scheme: &TagScheme) -> Option<String> {
    let mut best: Option<&Span> = None;
    for s in spans {
        if best.is_none_or(|b| s.end - s.start > b.end - b.start) {
            best = Some(s);
        }
    }
    best.map(|s| scheme.categories()[s.category].clone())
}

/// Combines matched pairs with per-segment entity tags. Pairs take
/// priority: a matched value is categorized through its key; a mapper miss
/// falls back to the value's own entity category. Segments outside every
/// pair use their entity spans, or are unassigned when all-`O`.
pub fn merge_predictions(
    doc: &Document,
    pairs: &[MatchedPair],
    segment_tags: &[Vec<usize>],
    scheme: &TagScheme,
    mapper: &CategoryMapper,
    label_scheme: LabelScheme,
) -> Result<ExtractionResult> {
    let n = doc.segments.len();
    if segment_tags.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} tag sequences for {n} segments",
            segment_tags.len()
        )));
    }
    let spans: Vec<Vec<Span>> = segment_tags.iter().map(|t| scheme.decode(t)).collect();
    let mut out = ExtractionResult::default();
    let mut in_pair = vec![false; n];
    for p in pairs {
        let category = match label_scheme {
            LabelScheme::Funsd => ANSWER_LABEL.to_string(),
            LabelScheme::Categorical => {
                let mapped = mapper.map(&doc.segments[p.key].text)?;
                if mapped == UNKNOWN_CATEGORY {
                    dominant_category(&spans[p.value], scheme).unwrap_or(mapped)
                } else {
                    mapped
                }
            }
        };
        in_pair[p.key] = true;
        in_pair[p.value] = true;
        out.pairs.push(PairExtraction {
            key: p.key,
            value: p.value,
            category,
            confidence: p.confidence,
        });
    }
    for (id, seg_spans) in spans.iter().enumerate() {
        if in_pair[id] {
            continue;
        }
        match dominant_category(seg_spans, scheme) {
            Some(category) => out.standalone.push(StandaloneExtraction {
                segment_id: id,
                category,
                spans: seg_spans
                    .iter()
                    .map(|s| (scheme.categories()[s.category].clone(), s.start, s.end))
                    .collect(),
            }),
            None => out.unassigned.push(id),
        }
    }
    Ok(out)
}

/// One line of the extraction output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub segment_id: usize,
    pub role: String,
    pub category: String,
    pub text: String,
    pub confidence: Option<f64>,
    pub paired_with: Vec<usize>,
}

/// One record per segment, in segment order.
pub fn extraction_records(doc: &Document, result: &ExtractionResult, label_scheme: LabelScheme) -> Vec<ExtractionRecord> {
    let mut records: Vec<Option<ExtractionRecord>> = vec![None; doc.segments.len()];
    let text = |id: usize| doc.segments[id].text.clone();
    for p in &result.pairs {
        let v = records[p.value].get_or_insert_with(|| ExtractionRecord {
            segment_id: p.value,
            role: "value".into(),
            category: p.category.clone(),
            text: text(p.value),
            confidence: Some(p.confidence),
            paired_with: Vec::new(),
        });
        v.paired_with.push(p.key);
    }
    for p in &result.pairs {
        let key_category = match label_scheme {
            LabelScheme::Funsd => QUESTION_LABEL.to_string(),
            LabelScheme::Categorical => KEY_LABEL.to_string(),
        };
        let k = records[p.key].get_or_insert_with(|| ExtractionRecord {
            segment_id: p.key,
            role: "key".into(),
            category: key_category,
            text: text(p.key),
            confidence: Some(p.confidence),
            paired_with: Vec::new(),
        });
        if k.role == "key" {
            k.paired_with.push(p.value);
            k.confidence = Some(k.confidence.unwrap_or(0.0).max(p.confidence));
        }
    }
    for s in &result.standalone {
        records[s.segment_id] = Some(ExtractionRecord {
            segment_id: s.segment_id,
            role: "standalone".into(),
            category: s.category.clone(),
            text: text(s.segment_id),
            confidence: None,
            paired_with: Vec::new(),
        });
    }
    for &u in &result.unassigned {
        records[u] = Some(ExtractionRecord {
            segment_id: u,
            role: "unassigned".into(),
            category: OTHER_LABEL.into(),
            text: text(u),
            confidence: None,
            paired_with: Vec::new(),
        });
    }
    records.into_iter().flatten().collect()
}

pub fn records_to_jsonl(records: &[ExtractionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
