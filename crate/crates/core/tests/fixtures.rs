mod common;

use std::fs;

use evitab::corpus::{
    from_iob, read_annotations_str, to_iob, write_annotations_string, EntityLabel, RelationLabel,
};
use evitab::tabulate::{assemble_table, emit_csv, tabulate_batch, Annotator};

#[test]
fn markup_fixtures_are_valid_gold() {
    let docs = common::corpus();
    assert_eq!(docs.len(), 24);
    let domains: std::collections::BTreeSet<_> =
        docs.iter().map(|d| d.meta.domain.as_str()).collect();
    assert_eq!(domains.len(), 6);
    for d in docs.iter().chain([common::figure4()].iter()) {
        assert!(
            d.gold_violations().is_empty(),
            "{}: {:?}",
            d.id,
            d.gold_violations()
        );
        assert!(!d.relations.is_empty());
    }
}

#[test]
fn annotation_file_matches_markup() {
    let path = common::fixture_path("corpus.jsonl");
    let rendered = write_annotations_string(&common::corpus());
    if std::env::var_os("EVITAB_REGEN_FIXTURES").is_some() {
        fs::write(&path, &rendered).unwrap();
    }
    let frozen = fs::read_to_string(&path).unwrap();
    assert_eq!(frozen, rendered);
    let docs = read_annotations_str(&frozen).unwrap();
    assert_eq!(docs, common::corpus());
    assert_eq!(write_annotations_string(&docs), frozen);
}

#[test]
fn fixture_label_totals() {
    let docs = common::corpus();
    let count = |l: EntityLabel| {
        docs.iter()
            .flat_map(|d| &d.entities)
            .filter(|s| s.label == l)
            .count()
    };
    let rcount = |l: RelationLabel| {
        docs.iter()
            .flat_map(|d| &d.relations)
            .filter(|e| e.label == l)
            .count()
    };
    assert_eq!(
        (
            count(EntityLabel::Intv),
            count(EntityLabel::Oc),
            count(EntityLabel::Meas)
        ),
        (43, 25, 44)
    );
    assert_eq!(
        (
            rcount(RelationLabel::OcRes),
            rcount(RelationLabel::A1Res),
            rcount(RelationLabel::A2Res)
        ),
        (44, 25, 19)
    );
}

#[test]
fn iob_round_trip_on_fixtures() {
    for d in common::corpus() {
        let back = from_iob(&d.tokens, &to_iob(&d)).unwrap();
        let mut want = d.entities.clone();
        want.sort();
        assert_eq!(back.entities, want, "{}", d.id);
        assert_eq!(back.text, d.text);
    }
}

#[test]
fn figure4_golden_csv() {
    let doc = common::figure4();
    let golden = fs::read_to_string(common::fixture_path("figure4.csv")).unwrap();
    assert_eq!(emit_csv(&assemble_table(&doc)), golden);

    let dir = tempfile::tempdir().unwrap();
    let written = tabulate_batch(std::slice::from_ref(&doc), Annotator::Gold, dir.path()).unwrap();
    assert_eq!(fs::read(&written[0].1).unwrap(), golden.as_bytes());
}
