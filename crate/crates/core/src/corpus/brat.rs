use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{
    char_slice, doc_id, tokenize, Doc, EntityLabel, EntitySpan, Meta, RelationEdge, RelationLabel,
    Segmenter, SpanId,
};
use crate::error::{Error, Result};

/// A character-offset text-bound annotation (`T` line).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharSpan {
    pub id: String,
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

/// A binary relation (`R` line) between two text-bound annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BratRelation {
    pub id: String,
    pub label: String,
    pub arg1: String,
    pub arg2: String,
}

/// One abstract with its standoff annotations, labels still in the source vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BratDocument {
    pub text: String,
    pub spans: Vec<CharSpan>,
    pub relations: Vec<BratRelation>,
}

/// Parses a brat `.txt`/`.ann` pair held in memory.
///
/// `T` and `R` lines are read; `#` notes and `A`/`N` attribute lines are
/// skipped. Discontinuous spans are rejected as malformed.
pub fn parse_brat(text: &str, ann: &str) -> Result<BratDocument> {
    let n_chars = text.chars().count();
    let mut doc = BratDocument {
        text: text.to_owned(),
        ..Default::default()
    };
    for (i, raw) in ann.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |message: &str| Error::Parse {
            line,
            message: format!("{message}: {raw:?}"),
        };
        match raw.chars().next() {
            Some('T') => {
                let mut fields = raw.splitn(3, '\t');
                let (Some(id), Some(body), Some(surface)) =
                    (fields.next(), fields.next(), fields.next())
                else {
                    return Err(malformed(
                        "expected `T<k>\\t<LABEL> <start> <end>\\t<surface>`",
                    ));
                };
                if body.contains(';') {
                    return Err(malformed("discontinuous spans are not supported"));
                }
                let parts: Vec<&str> = body.split(' ').collect();
                let [label, start, end] = parts[..] else {
                    return Err(malformed("expected `<LABEL> <start> <end>`"));
                };
                let start: usize = start.parse().map_err(|_| malformed("bad start offset"))?;
                let end: usize = end.parse().map_err(|_| malformed("bad end offset"))?;
                if start >= end || end > n_chars {
                    return Err(Error::Range(format!(
                        "line {line}: span {start}..{end} outside text of {n_chars} chars"
                    )));
                }
                let actual = char_slice(text, start, end);
                if actual != surface {
                    return Err(Error::Integrity(format!(
                        "line {line}: surface {surface:?} does not match text {actual:?} at {start}..{end}"
                    )));
                }
                doc.spans.push(CharSpan {
                    id: id.to_owned(),
                    label: label.to_owned(),
                    start,
                    end,
                    surface: surface.to_owned(),
                });
            }
            Some('R') => {
                let mut fields = raw.split('\t');
                let (Some(id), Some(body)) = (fields.next(), fields.next()) else {
                    return Err(malformed("expected `R<k>\\t<LABEL> Arg1:<T> Arg2:<T>`"));
                };
                let parts: Vec<&str> = body.split(' ').collect();
                let [label, a1, a2] = parts[..] else {
                    return Err(malformed("expected `<LABEL> Arg1:<T> Arg2:<T>`"));
                };
                let arg = |s: &str, key: &str| {
                    s.strip_prefix(key)
                        .map(str::to_owned)
                        .ok_or_else(|| malformed("bad relation argument"))
                };
                doc.relations.push(BratRelation {
                    id: id.to_owned(),
                    label: label.to_owned(),
                    arg1: arg(a1, "Arg1:")?,
                    arg2: arg(a2, "Arg2:")?,
                });
            }
            Some('#') | Some('A') | Some('N') => {}
            _ => return Err(malformed("unrecognised annotation line")),
        }
    }
    let ids: Vec<&str> = doc.spans.iter().map(|s| s.id.as_str()).collect();
    for rel in &doc.relations {
        for arg in [&rel.arg1, &rel.arg2] {
            if !ids.contains(&arg.as_str()) {
                return Err(Error::Integrity(format!(
                    "relation {} references unknown span {arg}",
                    rel.id
                )));
            }
        }
    }
    Ok(doc)
}

/// Reads and parses a `.txt`/`.ann` pair from disk.
pub fn parse_brat_files(
    text_file: impl AsRef<Path>,
    ann_file: impl AsRef<Path>,
) -> Result<BratDocument> {
    let (tp, ap) = (text_file.as_ref(), ann_file.as_ref());
    let text = fs::read_to_string(tp).map_err(|e| Error::io(tp, e))?;
    let ann = fs::read_to_string(ap).map_err(|e| Error::io(ap, e))?;
    parse_brat(&text, &ann)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapTarget {
    Label(EntityLabel),
    Drop,
}

/// Source-label to schema-label table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMapping {
    entries: BTreeMap<String, MapTarget>,
}

impl LabelMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn map(mut self, source: impl Into<String>, label: EntityLabel) -> Self {
        self.entries.insert(source.into(), MapTarget::Label(label));
        self
    }

    pub fn drop(mut self, source: impl Into<String>) -> Self {
        self.entries.insert(source.into(), MapTarget::Drop);
        self
    }

    pub fn get(&self, source: &str) -> Option<MapTarget> {
        self.entries.get(source).copied()
    }
}

impl FromStr for LabelMapping {
    type Err = Error;

    /// `Intervention=INTV,Outcome=OC,Participants=drop`
    fn from_str(s: &str) -> Result<Self> {
        let mut mapping = LabelMapping::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (src, dst) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("mapping entry {item:?} is not source=TARGET"))
            })?;
            mapping = match dst.trim() {
                "drop" | "DROP" => mapping.drop(src.trim()),
                label => mapping.map(src.trim(), label.parse()?),
            };
        }
        Ok(mapping)
    }
}

/// Rewrites source labels to schema labels, removing spans marked `drop`
/// along with any relation that touched them.
pub fn map_source_labels(doc: &BratDocument, mapping: &LabelMapping) -> Result<BratDocument> {
    let mut spans = Vec::with_capacity(doc.spans.len());
    for span in &doc.spans {
        match mapping.get(&span.label) {
            Some(MapTarget::Label(label)) => spans.push(CharSpan {
                label: label.as_str().to_owned(),
                ..span.clone()
            }),
            Some(MapTarget::Drop) => {}
            None => {
                return Err(Error::Config(format!(
                    "source label {:?} on {} has no mapping entry",
                    span.label, span.id
                )))
            }
        }
    }
    let kept: Vec<&str> = spans.iter().map(|s| s.id.as_str()).collect();
    let relations = doc
        .relations
        .iter()
        .filter(|r| kept.contains(&r.arg1.as_str()) && kept.contains(&r.arg2.as_str()))
        .cloned()
        .collect();
    Ok(BratDocument {
        text: doc.text.clone(),
        spans,
        relations,
    })
}

impl BratDocument {
    /// Splits the abstract into sentence Docs and projects the (schema-labelled)
    /// character spans onto tokens.
    ///
    /// A span is assigned to the sentence holding its first character and
    /// clipped to that sentence. Spans overlapping an earlier-kept span are
    /// dropped; each such repair is returned as a diagnostic.
    pub fn to_docs(
        &self,
        pmid: &str,
        domain: &str,
        segmenter: &Segmenter,
    ) -> Result<(Vec<Doc>, Vec<String>)> {
        let mut diagnostics = Vec::new();
        let segments = segmenter.segment(&self.text);
        let mut docs: Vec<Doc> = segments
            .iter()
            .enumerate()
            .map(|(i, seg)| Doc {
                id: doc_id(pmid, i),
                text: seg.text.clone(),
                tokens: tokenize(&seg.text),
                meta: Meta {
                    pmid: pmid.to_owned(),
                    domain: domain.to_owned(),
                    ..Default::default()
                },
                ..Default::default()
            })
            .collect();

        let mut placed: HashMap<&str, (usize, SpanId)> = HashMap::new();
        let mut spans: Vec<&CharSpan> = self.spans.iter().collect();
        spans.sort_by_key(|s| (s.start, std::cmp::Reverse(s.end)));
        for span in spans {
            let label: EntityLabel = span.label.parse().map_err(|_| {
                Error::Config(format!(
                    "span {} carries unmapped label {:?}",
                    span.id, span.label
                ))
            })?;
            let Some(si) = segments
                .iter()
                .position(|s| span.start >= s.start && span.start < s.end)
            else {
                diagnostics.push(format!("{}: span {} lies between sentences", pmid, span.id));
                continue;
            };
            let seg = &segments[si];
            let (lo, hi) = (span.start - seg.start, span.end.min(seg.end) - seg.start);
            if span.end > seg.end {
                diagnostics.push(format!(
                    "{}: span {} crosses a sentence boundary, clipped",
                    pmid, span.id
                ));
            }
            let doc = &mut docs[si];
            let covered: Vec<usize> = doc
                .tokens
                .iter()
                .filter(|t| t.start < hi && t.end > lo)
                .map(|t| t.index)
                .collect();
            let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
                diagnostics.push(format!("{}: span {} covers no token", pmid, span.id));
                continue;
            };
            let candidate = EntitySpan::new(label, first, last);
            if doc.entities.iter().any(|e| e.overlaps(&candidate)) {
                diagnostics.push(format!(
                    "{}: span {} overlaps an earlier span, dropped",
                    pmid, span.id
                ));
                continue;
            }
            doc.entities.push(candidate);
            placed.insert(span.id.as_str(), (si, candidate.id()));
        }

        for rel in &self.relations {
            let label: RelationLabel = rel.label.parse()?;
            match (placed.get(rel.arg1.as_str()), placed.get(rel.arg2.as_str())) {
                (Some(&(s1, parent)), Some(&(s2, child))) if s1 == s2 => {
                    docs[s1]
                        .relations
                        .push(RelationEdge::new(label, parent, child));
                }
                _ => diagnostics.push(format!("{}: relation {} could not be placed", pmid, rel.id)),
            }
        }
        for doc in &mut docs {
            doc.canonicalize();
        }
        Ok((docs, diagnostics))
    }
}
