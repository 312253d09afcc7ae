//! Result-sentence records and everything that gets them in and out of the
//! toolkit: brat ingestion, IOB conversion, segmentation, annotation files
//! and dataset splits.

mod annotations;
mod brat;
mod iob;
pub mod markup;
mod pubmed;
mod segment;
mod select;
mod split;
mod tokenize;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotations::{
    read_annotations, read_annotations_str, write_annotations, write_annotations_string,
    AnnotationRecord, MetaRecord, RelationRecord,
};
pub use brat::{
    map_source_labels, parse_brat, parse_brat_files, BratDocument, BratRelation, CharSpan,
    LabelMapping, MapTarget,
};
pub use iob::{from_iob, to_iob, IobTag};
pub use pubmed::{partition_by_domain, EntrezClient, LiteratureIndex, QueryCache, QUERY_BATCHES};
pub use segment::{segment_sentences, Segment, Segmenter};
pub use select::{select_result_sentences, AbstractRecord, Section};
pub use split::{
    domain_holdout, mixed_domain_pool, read_manifest, split_dataset, split_sizes,
    stratify_fraction, DatasetSplit, SplitSet, DEFAULT_RATIOS,
};
pub use tokenize::tokenize;

/// Entity labels of the annotation schema.
///
/// Variants are declared alphabetically so that `Ord` gives the tie-break
/// order used by the decoder; [`EntityLabel::ALL`] is the display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityLabel {
    #[serde(rename = "INTV")]
    Intv,
    #[serde(rename = "MEAS")]
    Meas,
    #[serde(rename = "OC")]
    Oc,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 3] = [EntityLabel::Intv, EntityLabel::Oc, EntityLabel::Meas];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Intv => "INTV",
            EntityLabel::Meas => "MEAS",
            EntityLabel::Oc => "OC",
        }
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "INTV" => Ok(EntityLabel::Intv),
            "MEAS" => Ok(EntityLabel::Meas),
            "OC" => Ok(EntityLabel::Oc),
            other => Err(Error::Config(format!("unknown entity label {other:?}"))),
        }
    }
}

/// Directed relation labels; the declaration order is the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationLabel {
    #[serde(rename = "OC_RES")]
    OcRes,
    #[serde(rename = "A1_RES")]
    A1Res,
    #[serde(rename = "A2_RES")]
    A2Res,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 3] = [
        RelationLabel::OcRes,
        RelationLabel::A1Res,
        RelationLabel::A2Res,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationLabel::OcRes => "OC_RES",
            RelationLabel::A1Res => "A1_RES",
            RelationLabel::A2Res => "A2_RES",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OC_RES" => Ok(RelationLabel::OcRes),
            "A1_RES" => Ok(RelationLabel::A1Res),
            "A2_RES" => Ok(RelationLabel::A2Res),
            other => Err(Error::Config(format!("unknown relation label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Char offset into the sentence, inclusive.
    pub start: usize,
    /// Char offset, exclusive.
    pub end: usize,
    #[serde(rename = "id")]
    pub index: usize,
}

/// Identity of a span within its Doc: the index of its first token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanId(pub usize);

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Labelled token range, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub token_start: usize,
    pub token_end: usize,
    pub label: EntityLabel,
}

impl EntitySpan {
    pub fn new(label: EntityLabel, token_start: usize, token_end: usize) -> Self {
        EntitySpan {
            token_start,
            token_end,
            label,
        }
    }

    pub fn id(&self) -> SpanId {
        SpanId(self.token_start)
    }

    pub fn len(&self) -> usize {
        self.token_end + 1 - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.token_start <= other.token_end && other.token_start <= self.token_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationEdge {
    pub parent: SpanId,
    pub child: SpanId,
    pub label: RelationLabel,
}

impl RelationEdge {
    pub fn new(label: RelationLabel, parent: SpanId, child: SpanId) -> Self {
        RelationEdge {
            parent,
            child,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    #[default]
    Accept,
    Reject,
    Pending,
}

impl FromStr for Answer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accept" => Ok(Answer::Accept),
            "reject" => Ok(Answer::Reject),
            "pending" => Ok(Answer::Pending),
            other => Err(Error::Config(format!("unknown answer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Meta {
    pub pmid: String,
    pub domain: String,
    pub answer: Answer,
    /// Set when the sentence was selected without a RESULTS header.
    pub low_confidence: bool,
}

/// One result sentence with its tokens, entity spans and relation edges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Doc {
    /// `<pmid>:<sentence-index>`.
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationEdge>,
    pub meta: Meta,
}

pub fn doc_id(pmid: &str, sentence_index: usize) -> String {
    format!("{pmid}:{sentence_index}")
}

impl Doc {
    /// Builds an unannotated Doc by tokenizing `text`.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Doc {
            id: id.into(),
            text,
            tokens,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span(&self, id: SpanId) -> Option<&EntitySpan> {
        self.entities.iter().find(|s| s.token_start == id.0)
    }

    /// Surface text of a span, sliced from the sentence.
    pub fn span_text(&self, span: &EntitySpan) -> &str {
        match (
            self.tokens.get(span.token_start),
            self.tokens.get(span.token_end),
        ) {
            (Some(first), Some(last)) => char_slice(&self.text, first.start, last.end),
            _ => "",
        }
    }

    /// Drops annotations, keeping text and tokens.
    pub fn unannotated(&self) -> Doc {
        Doc {
            entities: Vec::new(),
            relations: Vec::new(),
            ..self.clone()
        }
    }

    /// Sorts entities by start token and relations by (parent, child, label).
    pub fn canonicalize(&mut self) {
        self.entities.sort();
        self.entities.dedup();
        self.relations.sort();
        self.relations.dedup();
    }

    /// Structural invariants every Doc must satisfy, predicted or gold.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let chars = self.text.chars().count();
        let mut prev_end = 0;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.index != i {
                out.push(format!("token {i} carries index {}", tok.index));
            }
            if tok.start >= tok.end {
                out.push(format!(
                    "token {i} has empty range {}..{}",
                    tok.start, tok.end
                ));
            }
            if tok.start < prev_end {
                out.push(format!(
                    "token {i} overlaps or precedes token {}",
                    i.saturating_sub(1)
                ));
            }
            if tok.end > chars {
                out.push(format!(
                    "token {i} ends at {} beyond text length {chars}",
                    tok.end
                ));
            } else if char_slice(&self.text, tok.start, tok.end) != tok.text {
                out.push(format!(
                    "token {i} text {:?} does not match the sentence slice",
                    tok.text
                ));
            }
            prev_end = tok.end;
        }
        let mut spans: Vec<&EntitySpan> = self.entities.iter().collect();
        spans.sort();
        for s in &spans {
            if s.token_start > s.token_end {
                out.push(format!("span {} ends before it starts", s.token_start));
            }
            if s.token_end >= self.tokens.len() {
                out.push(format!(
                    "span {}..{} exceeds token count {}",
                    s.token_start,
                    s.token_end,
                    self.tokens.len()
                ));
            }
        }
        for pair in spans.windows(2) {
            if pair[0].overlaps(pair[1]) {
                out.push(format!(
                    "spans {}..{} and {}..{} overlap",
                    pair[0].token_start, pair[0].token_end, pair[1].token_start, pair[1].token_end
                ));
            }
        }
        let ids: BTreeSet<SpanId> = self.entities.iter().map(EntitySpan::id).collect();
        for edge in &self.relations {
            if edge.parent == edge.child {
                out.push(format!(
                    "relation {} links span {} to itself",
                    edge.label, edge.parent
                ));
            }
            for (role, id) in [("parent", edge.parent), ("child", edge.child)] {
                if !ids.contains(&id) {
                    out.push(format!(
                        "relation {} {role} {id} does not resolve to a span",
                        edge.label
                    ));
                }
            }
        }
        out
    }

    /// Structural invariants plus gold-data directionality: parents are INTV
    /// or OC, children are MEAS.
    pub fn gold_violations(&self) -> Vec<String> {
        let mut out = self.violations();
        let labels: HashMap<SpanId, EntityLabel> =
            self.entities.iter().map(|s| (s.id(), s.label)).collect();
        for edge in &self.relations {
            if let Some(&label) = labels.get(&edge.parent) {
                if label == EntityLabel::Meas {
                    out.push(format!(
                        "relation {} has MEAS parent {}",
                        edge.label, edge.parent
                    ));
                }
            }
            if let Some(&label) = labels.get(&edge.child) {
                if label != EntityLabel::Meas {
                    out.push(format!(
                        "relation {} has {label} child {}, expected MEAS",
                        edge.label, edge.child
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(format!(
                "doc {}: {}",
                self.id,
                v.join("; ")
            )))
        }
    }
}

/// Slices `text` by char offsets; out-of-range or empty ranges give "".
pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> &str {
    if end <= start {
        return "";
    }
    let mut bounds = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()));
    let Some(from) = bounds.nth(start) else {
        return "";
    };
    match bounds.nth(end - start - 1) {
        Some(to) => &text[from..to],
        None => "",
    }
}

/// Drops rejected Docs.
pub fn accepted(docs: impl IntoIterator<Item = Doc>) -> Vec<Doc> {
    docs.into_iter()
        .filter(|d| d.meta.answer != Answer::Reject)
        .collect()
}
