use std::sync::LazyLock;

use regex::Regex;

use super::{doc_id, segment::Segmenter, tokenize, Doc, Meta};

static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b([A-Z][A-Z]+(?:[ /&]+[A-Z]+)*)\s*:\s").expect("valid header regex")
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    /// Upper-case heading such as `RESULTS`, or `None` for unlabelled text.
    pub label: Option<String>,
    pub text: String,
}

/// An abstract split into (optionally) labelled sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractRecord {
    pub pmid: String,
    pub domain: String,
    pub sections: Vec<Section>,
}

impl AbstractRecord {
    /// Detects CONSORT-style `HEADING:` markers. A heading must open the
    /// text or follow a line break or sentence end.
    pub fn from_text(pmid: impl Into<String>, domain: impl Into<String>, text: &str) -> Self {
        let mut sections = Vec::new();
        let mut cursor = 0;
        let mut label: Option<String> = None;
        for caps in HEADER.captures_iter(text) {
            let m = caps.get(0).expect("whole match");
            let before = text[..m.start()].trim_end();
            let at_boundary = before.is_empty()
                || text[before.len()..m.start()].contains('\n')
                || before.ends_with(['.', '!', '?', ':']);
            if !at_boundary {
                continue;
            }
            push_section(&mut sections, label.take(), &text[cursor..m.start()]);
            label = Some(caps[1].to_owned());
            cursor = m.end();
        }
        push_section(&mut sections, label, &text[cursor..]);
        AbstractRecord {
            pmid: pmid.into(),
            domain: domain.into(),
            sections,
        }
    }

    pub fn has_labels(&self) -> bool {
        self.sections.iter().any(|s| s.label.is_some())
    }
}

fn push_section(sections: &mut Vec<Section>, label: Option<String>, text: &str) {
    let text = text.trim();
    if label.is_some() || !text.is_empty() {
        sections.push(Section {
            label,
            text: text.to_owned(),
        });
    }
}

/// Picks result sentences out of an abstract.
///
/// With a RESULTS-labelled section, its sentences are returned. Otherwise
/// every sentence holding a numeric token is returned with
/// `meta.low_confidence` set. Doc ids number sentences across the whole
/// abstract.
pub fn select_result_sentences(record: &AbstractRecord, segmenter: &Segmenter) -> Vec<Doc> {
    let has_results = record
        .sections
        .iter()
        .any(|s| s.label.as_deref().is_some_and(|l| l.contains("RESULT")));
    let mut docs = Vec::new();
    let mut index = 0;
    for section in &record.sections {
        let in_results = section
            .label
            .as_deref()
            .is_some_and(|l| l.contains("RESULT"));
        for seg in segmenter.segment(&section.text) {
            let sentence_index = index;
            index += 1;
            if seg.text.trim().is_empty() {
                continue;
            }
            let tokens = tokenize(&seg.text);
            let keep = if has_results {
                in_results
            } else {
                tokens
                    .iter()
                    .any(|t| t.text.chars().any(|c| c.is_ascii_digit()))
            };
            if keep {
                docs.push(Doc {
                    id: doc_id(&record.pmid, sentence_index),
                    text: seg.text,
                    tokens,
                    meta: Meta {
                        pmid: record.pmid.clone(),
                        domain: record.domain.clone(),
                        low_confidence: !has_results,
                        ..Default::default()
                    },
                    ..Default::default()
                });
            }
        }
    }
    docs
}
