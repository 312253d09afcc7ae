//! Inline bracket markup for writing annotated sentences by hand.
//!
//! ```text
//! [Latanoprost]{INTV:a} lowered [IOP]{OC:o} by [31%]{MEAS:m} || o>m:OC_RES a>m:A1_RES
//! ```
//!
//! Each `[surface]{LABEL:key}` becomes an entity span (the key is optional
//! when no relation refers to it); `parent>child:LABEL` items after `||`
//! become relation edges.

use std::collections::HashMap;

use super::{tokenize, Doc, EntityLabel, EntitySpan, RelationEdge, RelationLabel};
use crate::error::{Error, Result};

pub fn parse_markup(id: &str, markup: &str) -> Result<Doc> {
    let (body, rels) = match markup.split_once("||") {
        Some((b, r)) => (b.trim_end(), r.trim()),
        None => (markup.trim_end(), ""),
    };
    let bad = |msg: String| Error::Parse {
        line: 1,
        message: msg,
    };

    let mut text = String::new();
    let mut text_chars = 0;
    let mut marks: Vec<(usize, usize, EntityLabel, Option<String>)> = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('[') {
        let before = &rest[..open];
        text.push_str(before);
        text_chars += before.chars().count();
        let after = &rest[open + 1..];
        let close = after
            .find("]{")
            .ok_or_else(|| bad(format!("unclosed `[` in {markup:?}")))?;
        let surface = &after[..close];
        let tail = &after[close + 2..];
        let brace = tail
            .find('}')
            .ok_or_else(|| bad(format!("unclosed `{{` in {markup:?}")))?;
        let tag = &tail[..brace];
        let (label, key) = match tag.split_once(':') {
            Some((l, k)) => (l, Some(k.to_owned())),
            None => (tag, None),
        };
        let start = text_chars;
        text.push_str(surface);
        text_chars += surface.chars().count();
        marks.push((start, text_chars, label.parse()?, key));
        rest = &tail[brace + 1..];
    }
    text.push_str(rest);

    let mut doc = Doc::from_text(id, text);
    doc.tokens = tokenize(&doc.text);
    let mut keys: HashMap<String, EntitySpan> = HashMap::new();
    for (start, end, label, key) in marks {
        let covered: Vec<usize> = doc
            .tokens
            .iter()
            .filter(|t| t.start < end && t.end > start)
            .map(|t| t.index)
            .collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            return Err(bad(format!("entity at {start}..{end} covers no token")));
        };
        let span = EntitySpan::new(label, first, last);
        if let Some(k) = key {
            keys.insert(k, span);
        }
        doc.entities.push(span);
    }
    for item in rels.split_whitespace() {
        let (pair, label) = item
            .split_once(':')
            .ok_or_else(|| bad(format!("relation {item:?} is not parent>child:LABEL")))?;
        let (p, c) = pair
            .split_once('>')
            .ok_or_else(|| bad(format!("relation {item:?} is not parent>child:LABEL")))?;
        let lookup = |k: &str| {
            keys.get(k)
                .map(EntitySpan::id)
                .ok_or_else(|| bad(format!("unknown entity key {k:?}")))
        };
        let label: RelationLabel = label.parse()?;
        doc.relations
            .push(RelationEdge::new(label, lookup(p)?, lookup(c)?));
    }
    doc.canonicalize();
    doc.validate()?;
    Ok(doc)
}
