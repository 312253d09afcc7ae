//! Evidence tables: (outcome, arm 1, arm 2) tuples assembled from a Doc's
//! entities and relation edges, and the NER → RE → assembly pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Doc, EntityLabel, EntitySpan, RelationLabel, SpanId};
use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::ner::NerModel;
use crate::relex::RelexModel;

pub const CELL_JOIN: &str = "; ";
pub const OUTCOME_HEADER: &str = "outcome";
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct EvidenceTuple {
    pub outcome: String,
    pub arm1: String,
    pub arm2: String,
}

impl EvidenceTuple {
    pub fn new(
        outcome: impl Into<String>,
        arm1: impl Into<String>,
        arm2: impl Into<String>,
    ) -> Self {
        EvidenceTuple {
            outcome: outcome.into(),
            arm1: arm1.into(),
            arm2: arm2.into(),
        }
    }

    pub fn cells(&self) -> [&str; 3] {
        [&self.outcome, &self.arm1, &self.arm2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvidenceTable {
    pub doc_id: String,
    /// Intervention texts heading the two arm columns; empty when unresolved.
    pub arms: [String; 2],
    pub rows: Vec<EvidenceTuple>,
    pub diagnostics: Vec<String>,
}

impl EvidenceTable {
    pub fn header(&self) -> [&str; 3] {
        [OUTCOME_HEADER, &self.arms[0], &self.arms[1]]
    }
}

fn arm_index(label: RelationLabel) -> Option<usize> {
    match label {
        RelationLabel::OcRes => None,
        RelationLabel::A1Res => Some(0),
        RelationLabel::A2Res => Some(1),
    }
}

/// Builds the evidence table of one Doc.
///
/// Each MEAS child is placed by its edges: the OC_RES parent picks the row,
/// the A1_RES or A2_RES edge picks the column. Outcomes that parent at least
/// one edge get a row even when none of their measures can be placed;
/// measures with an arm edge but no outcome share one row with an empty
/// outcome, listed last. Anything that cannot be placed is reported in
/// `diagnostics`.
pub fn assemble_table(doc: &Doc) -> EvidenceTable {
    let mut diag = Vec::new();
    let spans: HashMap<SpanId, &EntitySpan> = doc.entities.iter().map(|s| (s.id(), s)).collect();
    let text = |id: SpanId| spans.get(&id).map_or("", |s| doc.span_text(s)).to_owned();

    let mut outcome_of: BTreeMap<SpanId, Vec<SpanId>> = BTreeMap::new();
    let mut arms_of: BTreeMap<SpanId, Vec<(usize, SpanId)>> = BTreeMap::new();
    let mut outcome_rows: BTreeSet<SpanId> = BTreeSet::new();
    for e in &doc.relations {
        let (Some(parent), Some(child)) = (spans.get(&e.parent), spans.get(&e.child)) else {
            diag.push(format!(
                "{} edge {}→{} does not resolve to spans",
                e.label, e.parent, e.child
            ));
            continue;
        };
        if child.label != EntityLabel::Meas {
            diag.push(format!(
                "{} edge {}→{} has {} child; only MEAS children are tabulated",
                e.label, e.parent, e.child, child.label
            ));
            continue;
        }
        match arm_index(e.label) {
            None => {
                if parent.label != EntityLabel::Oc {
                    diag.push(format!(
                        "OC_RES parent {} is {}, used as outcome anyway",
                        e.parent, parent.label
                    ));
                }
                outcome_rows.insert(e.parent);
                outcome_of.entry(e.child).or_default().push(e.parent);
            }
            Some(k) => {
                if parent.label != EntityLabel::Intv {
                    diag.push(format!(
                        "{} parent {} is {}, used as arm anyway",
                        e.label, e.parent, parent.label
                    ));
                }
                arms_of.entry(e.child).or_default().push((k, e.parent));
            }
        }
    }

    // cells[row][arm] -> measure ids in token order; None row = orphan measures
    let mut cells: BTreeMap<Option<SpanId>, [Vec<SpanId>; 2]> = BTreeMap::new();
    for oc in &outcome_rows {
        cells.entry(Some(*oc)).or_default();
    }
    let mut votes: [Vec<SpanId>; 2] = [Vec::new(), Vec::new()];
    let measures: BTreeSet<SpanId> = outcome_of.keys().chain(arms_of.keys()).copied().collect();
    for m in measures {
        let mut ocs = outcome_of.get(&m).cloned().unwrap_or_default();
        ocs.sort();
        ocs.dedup();
        if ocs.len() > 1 {
            diag.push(format!(
                "measure {m} has {} outcome parents; using the earliest",
                ocs.len()
            ));
        }
        let mut arms = arms_of.get(&m).cloned().unwrap_or_default();
        arms.sort();
        arms.dedup();
        let Some(&(k, _)) = arms.first() else {
            diag.push(format!(
                "measure {m} ({:?}) has no arm edge and was not placed",
                text(m)
            ));
            continue;
        };
        if arms.iter().any(|a| a.0 != k) {
            diag.push(format!(
                "measure {m} is linked to both arms; placed under arm 1"
            ));
        }
        for &(kk, parent) in &arms {
            if kk == k {
                votes[k].push(parent);
            }
        }
        let row = ocs.first().copied();
        let cell = &mut cells.entry(row).or_default()[k];
        if !cell.is_empty() {
            diag.push(format!(
                "several measures share arm {} of the same row",
                k + 1
            ));
        }
        cell.push(m);
    }

    let join = |ids: &[SpanId]| {
        ids.iter()
            .map(|&m| text(m))
            .collect::<Vec<_>>()
            .join(CELL_JOIN)
    };
    let rows: Vec<EvidenceTuple> = cells
        .iter()
        .filter(|(row, _)| row.is_some())
        .chain(cells.iter().filter(|(row, _)| row.is_none()))
        .map(|(row, [a1, a2])| EvidenceTuple {
            outcome: row.map(&text).unwrap_or_default(),
            arm1: join(a1),
            arm2: join(a2),
        })
        .collect();

    EvidenceTable {
        doc_id: doc.id.clone(),
        arms: [vote(&votes[0], &text), vote(&votes[1], &text)],
        rows,
        diagnostics: diag,
    }
}

/// Most frequent surface text; ties go to the text whose span starts first.
fn vote(parents: &[SpanId], text: &dyn Fn(SpanId) -> String) -> String {
    let mut tally: BTreeMap<String, (usize, SpanId)> = BTreeMap::new();
    for &p in parents {
        let e = tally.entry(text(p)).or_insert((0, p));
        e.0 += 1;
        e.1 = e.1.min(p);
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(t, _)| t)
        .unwrap_or_default()
}

/// Header line plus one line per row, `\n`-terminated.
pub fn emit_csv(table: &EvidenceTable) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(table.header()).expect("in-memory write");
    for row in &table.rows {
        w.write_record(row.cells()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush"))
        .expect("csv of utf-8 input is utf-8")
}

/// Parses CSV text written by [`emit_csv`] (or by hand) back into a header
/// and tuples.
pub fn parse_csv(text: &str) -> Result<([String; 3], Vec<EvidenceTuple>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        records.push([rec[0].to_owned(), rec[1].to_owned(), rec[2].to_owned()]);
    }
    let mut it = records.into_iter();
    let header = it.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let rows = it.map(|[o, a, b]| EvidenceTuple::new(o, a, b)).collect();
    Ok((header, rows))
}

/// NER then RE then assembly, with both models checked against one feature source.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub ner: NerModel,
    pub re: RelexModel,
    pub source: FeatureSource,
    pub threshold: f64,
}

impl Pipeline {
    pub fn new(
        ner: NerModel,
        re: RelexModel,
        source: FeatureSource,
        threshold: f64,
    ) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {threshold} outside (0, 1)"
            )));
        }
        source.check(ner.backend)?;
        source.check(re.backend)?;
        Ok(Pipeline {
            ner,
            re,
            source,
            threshold,
        })
    }

    /// Predicted entities and edges for one Doc; existing annotations are replaced.
    pub fn annotate(&self, doc: &Doc) -> Result<Doc> {
        let with_entities = self.ner.decode(doc, &self.source)?;
        self.re
            .annotate(&with_entities, &self.source, self.threshold)
    }

    pub fn table(&self, doc: &Doc) -> Result<EvidenceTable> {
        Ok(assemble_table(&self.annotate(doc)?))
    }
}

/// Where a batch's annotations come from.
#[derive(Debug, Clone, Copy)]
pub enum Annotator<'a> {
    Models(&'a Pipeline),
    /// Tabulate the Docs' own annotations.
    Gold,
}

/// Builds Docs with ids `input:<k>` from raw sentences.
pub fn docs_from_sentences<S: AsRef<str>>(sentences: &[S]) -> Vec<Doc> {
    sentences
        .iter()
        .enumerate()
        .map(|(k, s)| Doc::from_text(format!("input:{k}"), s.as_ref()))
        .collect()
}

/// Writes `<doc_id>.csv` for every Doc plus a `manifest.tsv` of
/// `doc_id\tpath` lines. All tables are computed before anything is written.
pub fn tabulate_batch(
    docs: &[Doc],
    annotator: Annotator<'_>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<(String, PathBuf)>> {
    let out_dir = out_dir.as_ref();
    let mut seen = BTreeSet::new();
    for d in docs {
        if d.id.is_empty() || d.id.contains(['/', '\\']) || d.id.starts_with('.') {
            return Err(Error::Config(format!(
                "doc id {:?} cannot name an output file",
                d.id
            )));
        }
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Config(format!(
                "duplicate doc id {:?} in batch",
                d.id
            )));
        }
    }
    let tables: Vec<EvidenceTable> = match annotator {
        Annotator::Gold => docs.iter().map(assemble_table).collect(),
        Annotator::Models(p) => docs.iter().map(|d| p.table(d)).collect::<Result<_>>()?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(tables.len());
    let mut manifest = String::new();
    for t in &tables {
        let path = out_dir.join(format!("{}.csv", t.doc_id));
        fs::write(&path, emit_csv(t)).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{}\t{}\n", t.doc_id, path.display()));
        written.push((t.doc_id.clone(), path));
    }
    let mpath = out_dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::markup::parse_markup;
    use crate::corpus::RelationEdge;

    fn table(markup: &str) -> EvidenceTable {
        assemble_table(&parse_markup("t:0", markup).unwrap())
    }

    const TWO_ARMS: &str =
        "[IOP reduction]{OC:o} was [31%]{MEAS:m1} with [latanoprost]{INTV:a} and \
                            [26%]{MEAS:m2} with [timolol]{INTV:b} \
                            || o>m1:OC_RES o>m2:OC_RES a>m1:A1_RES b>m2:A2_RES";

    #[test]
    fn two_arm_row() {
        let t = table(TWO_ARMS);
        assert_eq!(t.arms, ["latanoprost".to_string(), "timolol".to_string()]);
        assert_eq!(
            t.rows,
            vec![EvidenceTuple::new("IOP reduction", "31%", "26%")]
        );
        assert!(t.diagnostics.is_empty(), "{:?}", t.diagnostics);
        assert_eq!(
            emit_csv(&t),
            "outcome,latanoprost,timolol\nIOP reduction,31%,26%\n"
        );
    }

    #[test]
    fn no_relations_no_rows() {
        let t = table("[IOP]{OC} fell by [5 mmHg]{MEAS}");
        assert!(t.rows.is_empty());
        assert_eq!(emit_csv(&t), "outcome,,\n");
    }

    #[test]
    fn measures_in_one_cell_are_joined() {
        let t = table(
            "[IOP]{OC:o} fell by [5 mmHg]{MEAS:m1} and [20%]{MEAS:m2} with [drug]{INTV:a} \
             || o>m1:OC_RES o>m2:OC_RES a>m1:A1_RES a>m2:A1_RES",
        );
        assert_eq!(t.rows, vec![EvidenceTuple::new("IOP", "5 mmHg; 20%", "")]);
    }

    #[test]
    fn swapping_arm_labels_swaps_columns() {
        let mut doc = parse_markup("t:0", TWO_ARMS).unwrap();
        let before = assemble_table(&doc);
        for e in &mut doc.relations {
            e.label = match e.label {
                RelationLabel::A1Res => RelationLabel::A2Res,
                RelationLabel::A2Res => RelationLabel::A1Res,
                l => l,
            };
        }
        let after = assemble_table(&doc);
        assert_eq!(after.rows[0].arm1, before.rows[0].arm2);
        assert_eq!(after.rows[0].arm2, before.rows[0].arm1);
        assert_eq!(after.arms, [before.arms[1].clone(), before.arms[0].clone()]);
    }

    #[test]
    fn orphans_and_bare_outcomes() {
        let t = table(
            "[Pain]{OC:o} and [12%]{MEAS:m} with [drug]{INTV:a} and [8]{MEAS:n} \
             || o>n:OC_RES a>m:A1_RES",
        );
        // n has only an outcome edge; m has only an arm edge.
        assert_eq!(
            t.rows,
            vec![
                EvidenceTuple::new("Pain", "", ""),
                EvidenceTuple::new("", "12%", "")
            ]
        );
        assert_eq!(t.diagnostics.len(), 1);
    }

    #[test]
    fn quoting() {
        let t = EvidenceTable {
            rows: vec![EvidenceTuple::new("pain, at rest", "a \"b\"", "")],
            ..Default::default()
        };
        assert_eq!(
            emit_csv(&t),
            "outcome,,\n\"pain, at rest\",\"a \"\"b\"\"\",\n"
        );
        assert_eq!(parse_csv(&emit_csv(&t)).unwrap().1, t.rows);
    }

    #[test]
    fn dangling_edge_is_diagnosed() {
        let mut doc = parse_markup("t:0", "[IOP]{OC} fell by [5]{MEAS}").unwrap();
        doc.relations.push(RelationEdge::new(
            RelationLabel::OcRes,
            SpanId(0),
            SpanId(9),
        ));
        let t = assemble_table(&doc);
        assert!(t.rows.is_empty());
        assert_eq!(t.diagnostics.len(), 1);
    }

    #[test]
    fn gold_batch_writes_one_file_per_doc() {
        let dir = tempfile::tempdir().unwrap();
        let docs = vec![
            parse_markup("p:0", TWO_ARMS).unwrap(),
            Doc::from_text("p:1", "Nothing here."),
            Doc::from_text("p:2", "Nor here."),
        ];
        let out = tabulate_batch(&docs, Annotator::Gold, dir.path()).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(
            fs::read_to_string(dir.path().join("p:1.csv")).unwrap(),
            "outcome,,\n"
        );
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest.lines().count(), 3);
    }
}
