#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use evitab::corpus::markup::parse_markup;
use evitab::corpus::{doc_id, Doc};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Docs from a `pmid\tdomain\tmarkup` file; ids number sentences per pmid.
pub fn markup_docs(name: &str) -> Vec<Doc> {
    let text = fs::read_to_string(fixture_path(name)).unwrap();
    let mut counters: HashMap<String, usize> = HashMap::new();
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut parts = l.splitn(3, '\t');
            let (pmid, domain, markup) = (
                parts.next().unwrap(),
                parts.next().unwrap(),
                parts.next().unwrap(),
            );
            let k = counters.entry(pmid.to_owned()).or_insert(0);
            let mut d = parse_markup(&doc_id(pmid, *k), markup).unwrap();
            *k += 1;
            d.meta.pmid = pmid.to_owned();
            d.meta.domain = domain.to_owned();
            d.canonicalize();
            d
        })
        .collect()
}

/// The 24-sentence, six-domain fixture corpus.
pub fn corpus() -> Vec<Doc> {
    markup_docs("sentences.txt")
}

/// The first 20 fixture sentences, used for memorization runs.
pub fn memorization_set() -> Vec<Doc> {
    corpus().into_iter().take(20).collect()
}

pub fn figure4() -> Doc {
    markup_docs("figure4.txt").remove(0)
}
