//! Scorer inputs for both classifiers.
//!
//! Token representations come either from hashed lexical features or from
//! precomputed per-token embeddings. Models never see which one: they ask a
//! [`FeatureSource`] for per-token [`TokenVector`]s and place them into
//! slots of an [`InputBuilder`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::sync::{Arc, LazyLock};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Doc};
use crate::error::{Error, Result};

pub const DEFAULT_BUCKET_BITS: u32 = 20;
pub const DEFAULT_WINDOW: usize = 2;
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// Dense inputs reserve this many token slots before the categorical block.
const DENSE_SLOTS: u32 = 16;
const DENSE_EXTRA_BITS: u32 = 12;

const DEFAULT_UNITS: &str = include_str!("../data/units.txt");

static UNITS: LazyLock<UnitLexicon> = LazyLock::new(|| UnitLexicon::from_lexicon(DEFAULT_UNITS));

/// Multi-token unit lexicon (`mm Hg`, `%`, `mg/dL`, ...).
#[derive(Debug, Clone)]
pub struct UnitLexicon {
    entries: Vec<Vec<String>>,
}

impl UnitLexicon {
    pub fn from_lexicon(text: &str) -> Self {
        let mut entries: Vec<Vec<String>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                tokenize(l)
                    .into_iter()
                    .map(|t| t.text.to_lowercase())
                    .collect()
            })
            .collect();
        entries.sort();
        entries.dedup();
        UnitLexicon { entries }
    }

    /// Marks every token covered by some lexicon entry.
    pub fn mark(&self, words: &[String]) -> Vec<bool> {
        let mut marks = vec![false; words.len()];
        for entry in &self.entries {
            if entry.is_empty() || entry.len() > words.len() {
                continue;
            }
            for i in 0..=words.len() - entry.len() {
                if words[i..i + entry.len()]
                    .iter()
                    .zip(entry)
                    .all(|(w, e)| w == e)
                {
                    marks[i..i + entry.len()].iter_mut().for_each(|m| *m = true);
                }
            }
        }
        marks
    }
}

/// A token's representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenVector {
    Dense(Vec<f64>),
    /// Bucket index to weight; indices lie in `[0, 2^bits)`.
    Sparse(BTreeMap<u32, f64>),
}

impl TokenVector {
    pub fn is_dense(&self) -> bool {
        matches!(self, TokenVector::Dense(_))
    }
}

/// FNV-1a over the feature string, masked to `bits` bits.
pub fn feature_hash(feature: &str, bits: u32) -> u32 {
    let mut h = FnvHasher::default();
    h.write(feature.as_bytes());
    (h.finish() & mask(bits)) as u32
}

fn mask(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

/// Word shape with runs longer than four collapsed: `18.3` → `dd.d`,
/// `Latanoprost` → `Xxxxx`.
pub fn word_shape(word: &str) -> String {
    let mut shape = String::new();
    let mut last = None;
    let mut run = 0;
    for c in word.chars() {
        let s = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if Some(s) == last {
            run += 1;
        } else {
            run = 1;
            last = Some(s);
        }
        if run <= 4 {
            shape.push(s);
        }
    }
    shape
}

pub fn is_numeric(word: &str) -> bool {
    let w = word.replace(',', "");
    !w.is_empty() && w.parse::<f64>().is_ok()
}

fn prefix(word: &str, n: usize) -> String {
    word.chars().take(n).collect()
}

fn suffix(word: &str, n: usize) -> String {
    let chars: Vec<char> = word.chars().collect();
    chars[chars.len().saturating_sub(n)..].iter().collect()
}

/// Lexical feature strings of token `index`, before hashing.
pub fn token_feature_strings(doc: &Doc, index: usize, window: usize) -> Result<Vec<String>> {
    let lower: Vec<String> = doc.tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let units = UNITS.mark(&lower);
    token_features_with(doc, &lower, &units, index, window)
}

fn token_features_with(
    doc: &Doc,
    lower: &[String],
    units: &[bool],
    index: usize,
    window: usize,
) -> Result<Vec<String>> {
    let Some(tok) = doc.tokens.get(index) else {
        return Err(Error::Range(format!(
            "token index {index} out of range for {} tokens",
            doc.tokens.len()
        )));
    };
    let w = &lower[index];
    let mut feats = vec![
        format!("w={w}"),
        format!("shape={}", word_shape(&tok.text)),
        format!("p3={}", prefix(w, 3)),
        format!("s3={}", suffix(w, 3)),
    ];
    if is_numeric(&tok.text) {
        feats.push("num".into());
    }
    if units[index] {
        feats.push("unit".into());
    }
    for off in 1..=window {
        for (sign, pos) in [('-', index.checked_sub(off)), ('+', Some(index + off))] {
            match pos.filter(|&p| p < lower.len()) {
                Some(p) => {
                    feats.push(format!("w[{sign}{off}]={}", lower[p]));
                    feats.push(format!(
                        "shape[{sign}{off}]={}",
                        word_shape(&doc.tokens[p].text)
                    ));
                    if units[p] {
                        feats.push(format!("unit[{sign}{off}]"));
                    }
                }
                None => feats.push(format!("w[{sign}{off}]=<pad>")),
            }
        }
    }
    Ok(feats)
}

fn hash_into(feats: &[String], bits: u32) -> TokenVector {
    let mut out = BTreeMap::new();
    for f in feats {
        *out.entry(feature_hash(f, bits)).or_insert(0.0) += 1.0;
    }
    TokenVector::Sparse(out)
}

/// Hashed lexical features of one token: lowercase form, shape, 3-char
/// prefix and suffix, numeric and unit flags, and neighbour forms within
/// `window`.
pub fn hash_token_features(
    doc: &Doc,
    index: usize,
    window: usize,
    bits: u32,
) -> Result<TokenVector> {
    Ok(hash_into(&token_feature_strings(doc, index, window)?, bits))
}

/// Per-token dense vectors keyed by doc id. Immutable once loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    entries: HashMap<String, Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    format_version: u32,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<()> {
        let id = id.into();
        if let Some(i) = vectors.iter().position(|v| v.len() != self.dim) {
            return Err(Error::Format {
                index: i,
                message: format!(
                    "entry {id}: vector of length {} in a dim-{} store",
                    vectors[i].len(),
                    self.dim
                ),
            });
        }
        self.entries.insert(id, vectors);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[Vec<f64>]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    /// The doc's vectors, checked to be one per token.
    pub fn aligned(&self, doc: &Doc) -> Result<&[Vec<f64>]> {
        let vectors = self.get(&doc.id).ok_or_else(|| Error::Alignment {
            doc_id: doc.id.clone(),
            message: "no embedding entry".into(),
        })?;
        if vectors.len() != doc.tokens.len() {
            return Err(Error::Alignment {
                doc_id: doc.id.clone(),
                message: format!("{} vectors for {} tokens", vectors.len(), doc.tokens.len()),
            });
        }
        Ok(vectors)
    }

    pub fn parse(content: &str) -> Result<Self> {
        let mut lines = content
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((_, first)) = lines.next() else {
            return Ok(EmbeddingStore::default());
        };
        let header: EmbeddingHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("embedding header: {e}"),
        })?;
        if header.format_version != EMBEDDING_FORMAT_VERSION {
            return Err(Error::Format {
                index: 0,
                message: format!(
                    "unsupported embedding format version {}",
                    header.format_version
                ),
            });
        }
        let mut store = EmbeddingStore::new(header.dim);
        for (i, line) in lines {
            let rec: EmbeddingRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.dim != header.dim {
                return Err(Error::Format {
                    index: i,
                    message: format!(
                        "entry {} declares dim {} but the header says {}",
                        rec.id, rec.dim, header.dim
                    ),
                });
            }
            store.insert(rec.id, rec.vectors).map_err(|e| match e {
                Error::Format { message, .. } => Error::Format { index: i, message },
                other => other,
            })?;
        }
        Ok(store)
    }

    /// Serializes with the header first and entries sorted by id.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&EmbeddingHeader {
            format_version: EMBEDDING_FORMAT_VERSION,
            dim: self.dim,
        })
        .expect("header serializes");
        out.push('\n');
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        for id in ids {
            let rec = EmbeddingRecord {
                id: id.clone(),
                dim: self.dim,
                vectors: self.entries[id].clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::parse(&content)
}

/// Element-wise (dense) or bucket-wise (sparse) arithmetic mean.
pub fn pool_mean(vectors: &[TokenVector]) -> Result<TokenVector> {
    let Some(first) = vectors.first() else {
        return Err(Error::Contract("pool_mean of an empty sequence".into()));
    };
    let n = vectors.len() as f64;
    match first {
        TokenVector::Dense(d0) => {
            let mut sum = vec![0.0; d0.len()];
            for v in vectors {
                let TokenVector::Dense(d) = v else {
                    return Err(Error::Contract(
                        "pool_mean over mixed dense and sparse vectors".into(),
                    ));
                };
                if d.len() != sum.len() {
                    return Err(Error::Contract(format!(
                        "pool_mean over dims {} and {}",
                        sum.len(),
                        d.len()
                    )));
                }
                sum.iter_mut().zip(d).for_each(|(s, x)| *s += x);
            }
            Ok(TokenVector::Dense(sum.into_iter().map(|s| s / n).collect()))
        }
        TokenVector::Sparse(_) => {
            let mut sum: BTreeMap<u32, f64> = BTreeMap::new();
            for v in vectors {
                let TokenVector::Sparse(s) = v else {
                    return Err(Error::Contract(
                        "pool_mean over mixed dense and sparse vectors".into(),
                    ));
                };
                for (&k, &x) in s {
                    *sum.entry(k).or_insert(0.0) += x;
                }
            }
            sum.values_mut().for_each(|s| *s /= n);
            Ok(TokenVector::Sparse(sum))
        }
    }
}

/// What a trained model expects its inputs to look like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Hashed { bits: u32 },
    Embeddings { dim: usize },
}

impl BackendKind {
    pub fn is_dense(&self) -> bool {
        matches!(self, BackendKind::Embeddings { .. })
    }
}

/// Produces per-token vectors for a Doc.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Hashed { bits: u32, window: usize },
    Embeddings(Arc<EmbeddingStore>),
}

impl Default for FeatureSource {
    fn default() -> Self {
        FeatureSource::Hashed {
            bits: DEFAULT_BUCKET_BITS,
            window: DEFAULT_WINDOW,
        }
    }
}

impl FeatureSource {
    pub fn hashed(bits: u32) -> Self {
        FeatureSource::Hashed {
            bits,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn embeddings(store: EmbeddingStore) -> Self {
        FeatureSource::Embeddings(Arc::new(store))
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            FeatureSource::Hashed { bits, .. } => BackendKind::Hashed { bits: *bits },
            FeatureSource::Embeddings(store) => BackendKind::Embeddings { dim: store.dim },
        }
    }

    /// Fails with a configuration error unless this source feeds `expected`.
    pub fn check(&self, expected: BackendKind) -> Result<()> {
        if self.kind() == expected {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model expects {expected:?} inputs but the feature source provides {:?}",
                self.kind()
            )))
        }
    }

    pub fn token_vectors(&self, doc: &Doc) -> Result<Vec<TokenVector>> {
        match self {
            FeatureSource::Hashed { bits, window } => {
                let lower: Vec<String> = doc.tokens.iter().map(|t| t.text.to_lowercase()).collect();
                let units = UNITS.mark(&lower);
                (0..doc.tokens.len())
                    .map(|i| {
                        Ok(hash_into(
                            &token_features_with(doc, &lower, &units, i, *window)?,
                            *bits,
                        ))
                    })
                    .collect()
            }
            FeatureSource::Embeddings(store) => Ok(store
                .aligned(doc)?
                .iter()
                .map(|v| TokenVector::Dense(v.clone()))
                .collect()),
        }
    }
}

/// Sparse model input: `(feature index, value)` pairs.
pub type Input = Vec<(u32, f64)>;

/// Lays token vectors and categorical features out in a model's input
/// space. Hashed backends fold slot ids into the bucket hash; dense
/// backends concatenate slots and append a hashed categorical block.
#[derive(Debug)]
pub struct InputBuilder {
    kind: BackendKind,
    out: Input,
}

impl InputBuilder {
    pub fn new(kind: BackendKind) -> Self {
        InputBuilder {
            kind,
            out: Vec::new(),
        }
    }

    pub fn slot(&mut self, slot: u32, v: &TokenVector) {
        match (self.kind, v) {
            (BackendKind::Hashed { bits }, TokenVector::Sparse(s)) => {
                let m = mask(bits);
                self.out
                    .extend(s.iter().map(|(&k, &x)| ((mix(k, slot) & m) as u32, x)));
            }
            (BackendKind::Embeddings { dim }, TokenVector::Dense(d)) => {
                debug_assert!(slot < DENSE_SLOTS);
                let base = slot * dim as u32;
                self.out.extend(
                    d.iter()
                        .enumerate()
                        .filter(|(_, x)| **x != 0.0)
                        .map(|(j, &x)| (base + j as u32, x)),
                );
            }
            _ => panic!("token vector does not match the {:?} backend", self.kind),
        }
    }

    pub fn categorical(&mut self, key: &str) {
        let index = match self.kind {
            BackendKind::Hashed { bits } => feature_hash(key, bits),
            BackendKind::Embeddings { dim } => {
                DENSE_SLOTS * dim as u32 + feature_hash(key, DENSE_EXTRA_BITS)
            }
        };
        self.out.push((index, 1.0));
    }

    pub fn finish(self) -> Input {
        self.out
    }
}

fn mix(bucket: u32, slot: u32) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u32(slot);
    h.write_u32(bucket);
    h.finish()
}

/// Distinct bucket indices of a set of feature strings, for diagnostics.
pub fn distinct_buckets(features: &[String], bits: u32) -> usize {
    features
        .iter()
        .map(|f| feature_hash(f, bits))
        .collect::<HashSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Doc {
        Doc::from_text("d:0", text)
    }

    #[test]
    fn numeric_token_features() {
        let d = doc("IOP fell to 18.3 mm Hg");
        let feats = token_feature_strings(&d, 3, 2).unwrap();
        assert!(feats.contains(&"num".to_string()));
        assert!(feats.contains(&"shape=dd.d".to_string()));
        let v = hash_token_features(&d, 3, 2, DEFAULT_BUCKET_BITS).unwrap();
        let TokenVector::Sparse(s) = &v else { panic!() };
        assert!(s.contains_key(&feature_hash("num", DEFAULT_BUCKET_BITS)));
        assert!(s.keys().all(|&k| k < 1 << DEFAULT_BUCKET_BITS));
    }

    #[test]
    fn hashing_is_deterministic() {
        let d = doc("Latanoprost lowered IOP by 31%");
        let a = hash_token_features(&d, 2, 2, 18).unwrap();
        let b = hash_token_features(&d, 2, 2, 18).unwrap();
        assert_eq!(a, b);
        assert_eq!(FeatureSource::hashed(18).token_vectors(&d).unwrap()[2], a);
    }

    #[test]
    fn case_changes_shape_not_lowercase_form() {
        let a = token_feature_strings(&doc("latanoprost"), 0, 2).unwrap();
        let b = token_feature_strings(&doc("Latanoprost"), 0, 2).unwrap();
        assert!(a.contains(&"w=latanoprost".into()) && b.contains(&"w=latanoprost".into()));
        assert!(a.contains(&"shape=xxxx".into()));
        assert!(b.contains(&"shape=Xxxxx".into()));
    }

    #[test]
    fn units_are_marked_across_tokens() {
        let feats = token_feature_strings(&doc("dropped 5 mm Hg"), 3, 2).unwrap();
        assert!(feats.contains(&"unit".into()));
        let feats = token_feature_strings(&doc("dropped 5 mm Hg"), 1, 2).unwrap();
        assert!(feats.contains(&"unit[+1]".into()) && !feats.contains(&"unit".into()));
        assert!(token_feature_strings(&doc("rose 39 %"), 2, 2)
            .unwrap()
            .contains(&"unit".into()));
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(
            hash_token_features(&doc("a b"), 2, 2, 10),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn embeddings_load_and_align() {
        let content = "{\"format_version\":1,\"dim\":4}\n\
                       {\"id\":\"a:0\",\"dim\":4,\"vectors\":[[1,2,3,4],[0,0,0,1]]}\n\
                       {\"id\":\"a:1\",\"dim\":4,\"vectors\":[[1,1,1,1]]}\n";
        let store = EmbeddingStore::parse(content).unwrap();
        assert_eq!(store.len(), 2);
        assert!(store.get("zz").is_none());
        assert_eq!(EmbeddingStore::parse(&store.to_jsonl()).unwrap(), store);

        let mut six = EmbeddingStore::new(2);
        six.insert("x:0", vec![vec![0.0, 1.0]; 5]).unwrap();
        let d = Doc::from_text("x:0", "a b c d e f");
        assert!(matches!(six.aligned(&d), Err(Error::Alignment { .. })));
    }

    #[test]
    fn embedding_dim_mismatch() {
        let content =
            "{\"format_version\":1,\"dim\":4}\n{\"id\":\"a\",\"dim\":3,\"vectors\":[[1,2,3]]}\n";
        assert!(matches!(
            EmbeddingStore::parse(content),
            Err(Error::Format { .. })
        ));
        let content =
            "{\"format_version\":1,\"dim\":4}\n{\"id\":\"a\",\"dim\":4,\"vectors\":[[1,2,3]]}\n";
        assert!(matches!(
            EmbeddingStore::parse(content),
            Err(Error::Format { index: 1, .. })
        ));
    }

    #[test]
    fn empty_embedding_file() {
        assert!(EmbeddingStore::parse("").unwrap().is_empty());
    }

    #[test]
    fn mean_pooling() {
        let dense = |v: &[f64]| TokenVector::Dense(v.to_vec());
        assert_eq!(
            pool_mean(&[dense(&[1.0, 2.0]), dense(&[3.0, 4.0])]).unwrap(),
            dense(&[2.0, 3.0])
        );
        assert_eq!(
            pool_mean(&[dense(&[1.5, -2.0])]).unwrap(),
            dense(&[1.5, -2.0])
        );
        assert!(matches!(pool_mean(&[]), Err(Error::Contract(_))));

        // {a:1} and {a:3, b:2}: a -> (1+3)/2 = 2, b -> (0+2)/2 = 1.
        let sparse = |v: &[(u32, f64)]| TokenVector::Sparse(v.iter().copied().collect());
        assert_eq!(
            pool_mean(&[sparse(&[(7, 1.0)]), sparse(&[(7, 3.0), (9, 2.0)])]).unwrap(),
            sparse(&[(7, 2.0), (9, 1.0)])
        );
        assert!(pool_mean(&[sparse(&[(1, 1.0)]), dense(&[1.0])]).is_err());
    }

    #[test]
    fn dense_slots_concatenate() {
        let mut b = InputBuilder::new(BackendKind::Embeddings { dim: 3 });
        b.slot(0, &TokenVector::Dense(vec![1.0, 0.0, 2.0]));
        b.slot(1, &TokenVector::Dense(vec![0.0, 5.0, 0.0]));
        let x = b.finish();
        assert_eq!(x, vec![(0, 1.0), (2, 2.0), (4, 5.0)]);
    }

    #[test]
    fn source_checks_backend() {
        let src = FeatureSource::hashed(12);
        assert!(src.check(BackendKind::Hashed { bits: 12 }).is_ok());
        assert!(matches!(
            src.check(BackendKind::Embeddings { dim: 4 }),
            Err(Error::Config(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sparse() -> impl Strategy<Value = TokenVector> {
            proptest::collection::btree_map(0u32..32, -4.0f64..4.0, 0..6)
                .prop_map(TokenVector::Sparse)
        }

        proptest! {
            #[test]
            fn pooling_is_permutation_invariant(mut vs in proptest::collection::vec(sparse(), 1..6)) {
                let a = pool_mean(&vs).unwrap();
                vs.reverse();
                let b = pool_mean(&vs).unwrap();
                let (TokenVector::Sparse(a), TokenVector::Sparse(b)) = (a, b) else { unreachable!() };
                prop_assert_eq!(a.len(), b.len());
                for (k, x) in &a {
                    prop_assert!((x - b[k]).abs() < 1e-12);
                }
            }

            #[test]
            fn pooling_single_is_identity(v in sparse()) {
                prop_assert_eq!(pool_mean(std::slice::from_ref(&v)).unwrap(), v);
            }
        }
    }
}
