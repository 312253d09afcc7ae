use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{doc_id, Answer, Doc, EntitySpan, Meta, RelationEdge, RelationLabel, SpanId, Token};
use crate::error::{Error, Result};

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub tokens: Vec<Token>,
    pub spans: Vec<EntitySpan>,
    pub relations: Vec<RelationRecord>,
    pub meta: MetaRecord,
    pub answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    pub head: SpanId,
    pub child: SpanId,
    pub label: RelationLabel,
}

impl From<&RelationEdge> for RelationRecord {
    fn from(r: &RelationEdge) -> Self {
        RelationRecord {
            head: r.parent,
            child: r.child,
            label: r.label,
        }
    }
}

impl From<&RelationRecord> for RelationEdge {
    fn from(r: &RelationRecord) -> Self {
        RelationEdge::new(r.label, r.head, r.child)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaRecord {
    pub pmid: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
}

impl AnnotationRecord {
    /// Converts without validating; a missing id becomes `fallback_id`.
    pub fn into_doc(self, fallback_id: impl FnOnce(&str) -> String) -> Doc {
        let id = self.id.unwrap_or_else(|| fallback_id(&self.meta.pmid));
        Doc {
            id,
            text: self.text,
            tokens: self.tokens,
            entities: self.spans,
            relations: self.relations.iter().map(RelationEdge::from).collect(),
            meta: Meta {
                pmid: self.meta.pmid,
                domain: self.meta.domain,
                answer: self.answer,
                low_confidence: self.meta.low_confidence,
            },
        }
    }
}

impl From<&Doc> for AnnotationRecord {
    fn from(doc: &Doc) -> Self {
        AnnotationRecord {
            id: Some(doc.id.clone()),
            text: doc.text.clone(),
            tokens: doc.tokens.clone(),
            spans: doc.entities.clone(),
            relations: doc.relations.iter().map(RelationRecord::from).collect(),
            meta: MetaRecord {
                pmid: doc.meta.pmid.clone(),
                domain: doc.meta.domain.clone(),
                low_confidence: doc.meta.low_confidence,
            },
            answer: doc.meta.answer,
        }
    }
}

/// Parses line-delimited annotation records.
///
/// Records without an `id` get `<pmid>:<k>`, `k` counting that pmid's
/// records in file order. Invalid JSON is a parse error; valid JSON that
/// breaks the record schema or Doc invariants is a schema error.
pub fn read_annotations_str(content: &str) -> Result<Vec<Doc>> {
    let mut per_pmid: HashMap<String, usize> = HashMap::new();
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record: AnnotationRecord =
            serde_json::from_value(value).map_err(|e| Error::Schema {
                line: line_no,
                message: e.to_string(),
            })?;
        let k = per_pmid.entry(record.meta.pmid.clone()).or_default();
        let doc = record.into_doc(|pmid| doc_id(pmid, *k));
        *k += 1;
        let violations = doc.violations();
        if !violations.is_empty() {
            return Err(Error::Schema {
                line: line_no,
                message: violations.join("; "),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Doc>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_annotations_str(&content)
}

/// Serializes Docs, one record per line, keys in canonical order.
pub fn write_annotations_string(docs: &[Doc]) -> String {
    let mut out = String::new();
    for doc in docs {
        out.push_str(
            &serde_json::to_string(&AnnotationRecord::from(doc)).expect("records always serialize"),
        );
        out.push('\n');
    }
    out
}

/// Writes an annotation file atomically (temp file then rename).
pub fn write_annotations(docs: &[Doc], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("jsonl.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(write_annotations_string(docs).as_bytes())
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityLabel, RelationLabel};

    fn fixture() -> Vec<Doc> {
        let mut a = Doc::from_text("11:0", "Latanoprost reduced IOP by 31%.");
        a.meta.pmid = "11".into();
        a.meta.domain = "glaucoma".into();
        a.entities = vec![
            EntitySpan::new(EntityLabel::Intv, 0, 0),
            EntitySpan::new(EntityLabel::Oc, 2, 2),
            EntitySpan::new(EntityLabel::Meas, 4, 5),
        ];
        a.relations = vec![
            RelationEdge::new(RelationLabel::OcRes, SpanId(2), SpanId(4)),
            RelationEdge::new(RelationLabel::A1Res, SpanId(0), SpanId(4)),
        ];
        let mut b = Doc::from_text("11:1", "No adverse events.");
        b.meta.pmid = "11".into();
        b.meta.domain = "glaucoma".into();
        b.meta.answer = Answer::Reject;
        let mut c = Doc::from_text("12:3", "Scores rose to 4.5 ± 1.2 (≥ baseline).");
        c.meta.pmid = "12".into();
        c.meta.domain = "autism".into();
        c.meta.low_confidence = true;
        vec![a, b, c]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let docs = fixture();
        let text = write_annotations_string(&docs);
        let back = read_annotations_str(&text).unwrap();
        assert_eq!(back, docs);
        assert_eq!(write_annotations_string(&back), text);
    }

    #[test]
    fn reject_flag_survives() {
        let docs = read_annotations_str(&write_annotations_string(&fixture())).unwrap();
        assert_eq!(docs[1].meta.answer, Answer::Reject);
    }

    #[test]
    fn missing_tokens_key_is_schema_error_with_line() {
        let mut lines: Vec<String> = write_annotations_string(&fixture())
            .lines()
            .map(str::to_owned)
            .collect();
        lines.extend(lines.clone());
        let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        v.as_object_mut().unwrap().remove("tokens");
        lines.push(v.to_string());
        let err = read_annotations_str(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 7, .. }), "{err}");
    }

    #[test]
    fn unknown_label_is_schema_error() {
        let line = write_annotations_string(&fixture()[..1]).replace("\"INTV\"", "\"DOSE\"");
        assert!(matches!(
            read_annotations_str(&line).unwrap_err(),
            Error::Schema { line: 1, .. }
        ));
    }

    #[test]
    fn bad_json_is_parse_error() {
        assert!(matches!(
            read_annotations_str("{oops").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn missing_id_is_derived_from_pmid() {
        let text = write_annotations_string(&fixture()).replace("\"id\":\"11:1\",", "");
        let docs = read_annotations_str(&text).unwrap();
        assert_eq!(docs[1].id, "11:1");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        write_annotations(&fixture(), &path).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), fixture());
    }
}
