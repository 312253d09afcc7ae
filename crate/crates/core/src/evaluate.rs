//! Micro-averaged precision, recall and F1 for entity recognition, relation
//! extraction (on gold or predicted entities) and evidence tables, plus
//! token- and pair-level confusion matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::ops::AddAssign;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Doc, EntityLabel, RelationLabel, SpanId};
use crate::error::{Error, Result};
use crate::tabulate::{assemble_table, parse_csv, EvidenceTuple, MANIFEST_NAME};

pub const NONE_LABEL: &str = "NONE";
pub const TUPLE_LABEL: &str = "tuple";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Ner,
    ReGold,
    Joint,
    TabStrict,
    TabRelaxed,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Ner,
        Task::ReGold,
        Task::Joint,
        Task::TabStrict,
        Task::TabRelaxed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::ReGold => "re-gold",
            Task::Joint => "joint",
            Task::TabStrict => "tab-strict",
            Task::TabRelaxed => "tab-relaxed",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MetricCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        MetricCounts { tp, fp, fn_ }
    }
}

impl AddAssign for MetricCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// `(P, R, F1)` with `F1 = tp / (tp + (fp + fn) / 2)`. Any ratio whose
/// denominator is zero is 0.
pub fn prf(c: MetricCounts) -> (f64, f64, f64) {
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    (
        ratio(tp, tp + fp),
        ratio(tp, tp + fn_),
        ratio(tp, tp + 0.5 * (fp + fn_)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl From<MetricCounts> for Scores {
    fn from(c: MetricCounts) -> Self {
        let (p, r, f1) = prf(c);
        Scores {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            p,
            r,
            f1,
        }
    }
}

impl Scores {
    pub fn counts(&self) -> MetricCounts {
        MetricCounts::new(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub overall: Scores,
    pub per_label: BTreeMap<String, Scores>,
    /// Tabulation only: whole tables scored as units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_level: Option<Scores>,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    fn from_counts(task: Task, per_label: BTreeMap<String, MetricCounts>, matching: &str) -> Self {
        let mut total = MetricCounts::default();
        per_label.values().for_each(|c| total += *c);
        let config = BTreeMap::from([
            ("matching".to_owned(), matching.to_owned()),
            ("zero_division".to_owned(), "0".to_owned()),
        ]);
        MetricsReport {
            task: task.as_str().to_owned(),
            overall: total.into(),
            per_label: per_label.into_iter().map(|(k, c)| (k, c.into())).collect(),
            table_level: None,
            config,
        }
    }

    pub fn with_config(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.config.insert(key.into(), value.to_string());
        self
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {}", self.task);
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}",
            "label", "tp", "fp", "fn", "P", "R", "F1"
        );
        let mut line = |name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>6} {:>6} {:>7.4} {:>7.4} {:>7.4}",
                name, s.tp, s.fp, s.fn_, s.p, s.r, s.f1
            );
        };
        for (label, s) in &self.per_label {
            line(label, s);
        }
        line("micro", &self.overall);
        if let Some(t) = &self.table_level {
            line("tables", t);
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Pairs predicted and gold Docs by id, in gold order.
pub fn pair_docs<'a>(pred: &'a [Doc], gold: &'a [Doc]) -> Result<Vec<(&'a Doc, &'a Doc)>> {
    let mut by_id: HashMap<&str, &Doc> = HashMap::new();
    for d in pred {
        if by_id.insert(&d.id, d).is_some() {
            return Err(Error::Pairing(format!(
                "duplicate predicted doc id {:?}",
                d.id
            )));
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(gold.len());
    for g in gold {
        if !seen.insert(g.id.as_str()) {
            return Err(Error::Pairing(format!("duplicate gold doc id {:?}", g.id)));
        }
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Pairing(format!("gold doc {:?} has no prediction", g.id)))?;
        out.push((*p, g));
    }
    if let Some(extra) = pred.iter().find(|p| !seen.contains(p.id.as_str())) {
        return Err(Error::Pairing(format!(
            "predicted doc {:?} has no gold counterpart",
            extra.id
        )));
    }
    Ok(out)
}

fn label_counts<L: fmt::Display>(
    labels: impl IntoIterator<Item = L>,
) -> BTreeMap<String, MetricCounts> {
    labels
        .into_iter()
        .map(|l| (l.to_string(), MetricCounts::default()))
        .collect()
}

type SpanKey = (usize, usize, EntityLabel);

/// Exact-match set comparison of labelled spans.
fn span_rule(
    pred: &BTreeSet<SpanKey>,
    gold: &BTreeSet<SpanKey>,
    counts: &mut BTreeMap<String, MetricCounts>,
) {
    for s in pred {
        let c = counts.entry(s.2.to_string()).or_default();
        if gold.contains(s) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for s in gold.difference(pred) {
        counts.entry(s.2.to_string()).or_default().fn_ += 1;
    }
}

/// Ordered-pair relation rule: a matching label is tp; every other predicted
/// label is fp; a gold label is fn only when no leftover predicted label on
/// the same pair stands against it.
fn pair_rule<K: Ord + Clone>(
    pred: &BTreeMap<K, BTreeSet<RelationLabel>>,
    gold: &BTreeMap<K, BTreeSet<RelationLabel>>,
    counts: &mut BTreeMap<String, MetricCounts>,
) {
    let empty = BTreeSet::new();
    let keys: BTreeSet<&K> = pred.keys().chain(gold.keys()).collect();
    for k in keys {
        let p = pred.get(k).unwrap_or(&empty);
        let g = gold.get(k).unwrap_or(&empty);
        for l in p.intersection(g) {
            counts.entry(l.to_string()).or_default().tp += 1;
        }
        let p_rest: Vec<_> = p.difference(g).collect();
        let g_rest: Vec<_> = g.difference(p).collect();
        for l in &p_rest {
            counts.entry(l.to_string()).or_default().fp += 1;
        }
        for l in g_rest.iter().skip(p_rest.len()) {
            counts.entry(l.to_string()).or_default().fn_ += 1;
        }
    }
}

fn span_keys(doc: &Doc) -> BTreeSet<SpanKey> {
    doc.entities
        .iter()
        .map(|s| (s.token_start, s.token_end, s.label))
        .collect()
}

pub fn eval_ner(pred: &[Doc], gold: &[Doc]) -> Result<MetricsReport> {
    let mut counts = label_counts(EntityLabel::ALL);
    for (p, g) in pair_docs(pred, gold)? {
        span_rule(&span_keys(p), &span_keys(g), &mut counts);
    }
    Ok(MetricsReport::from_counts(Task::Ner, counts, "exact-span"))
}

/// Relation extraction scored over gold entities: predicted edges must refer
/// to gold span ids.
pub fn eval_re_gold(pred: &[Doc], gold: &[Doc]) -> Result<MetricsReport> {
    let mut counts = label_counts(RelationLabel::ALL);
    for (p, g) in pair_docs(pred, gold)? {
        let ids: BTreeSet<SpanId> = g.entities.iter().map(|s| s.id()).collect();
        let mut pm: BTreeMap<(SpanId, SpanId), BTreeSet<RelationLabel>> = BTreeMap::new();
        for e in &p.relations {
            for end in [e.parent, e.child] {
                if !ids.contains(&end) {
                    return Err(Error::Integrity(format!(
                        "doc {}: predicted {} edge refers to span {end}, which is not a gold span",
                        p.id, e.label
                    )));
                }
            }
            pm.entry((e.parent, e.child)).or_default().insert(e.label);
        }
        let mut gm: BTreeMap<(SpanId, SpanId), BTreeSet<RelationLabel>> = BTreeMap::new();
        for e in &g.relations {
            gm.entry((e.parent, e.child)).or_default().insert(e.label);
        }
        pair_rule(&pm, &gm, &mut counts);
    }
    Ok(MetricsReport::from_counts(
        Task::ReGold,
        counts,
        "ordered-pair",
    ))
}

type Bounds = (usize, usize);

/// Edges keyed by the exact token boundaries of both endpoints.
fn boundary_edges(doc: &Doc) -> Result<BTreeMap<(Bounds, Bounds), BTreeSet<RelationLabel>>> {
    let spans: HashMap<SpanId, Bounds> = doc
        .entities
        .iter()
        .map(|s| (s.id(), (s.token_start, s.token_end)))
        .collect();
    let mut out: BTreeMap<_, BTreeSet<_>> = BTreeMap::new();
    for e in &doc.relations {
        let (Some(&p), Some(&c)) = (spans.get(&e.parent), spans.get(&e.child)) else {
            return Err(Error::Integrity(format!(
                "doc {}: {} edge {}→{} does not resolve to spans",
                doc.id, e.label, e.parent, e.child
            )));
        };
        out.entry((p, c)).or_default().insert(e.label);
    }
    Ok(out)
}

/// End-to-end scoring of predicted entities and edges.
///
/// Relations use the ordered-pair rule over gold and predicted edges, with
/// pairs identified by exact span boundaries, so an edge on a missed or
/// mis-bounded entity is fn (gold) or fp (predicted). Entities that take
/// part in no edge on either side are scored with the exact-span rule.
pub fn eval_joint(pred: &[Doc], gold: &[Doc]) -> Result<MetricsReport> {
    let mut counts = label_counts(EntityLabel::ALL);
    counts.extend(label_counts(RelationLabel::ALL));
    for (p, g) in pair_docs(pred, gold)? {
        let pe = boundary_edges(p)?;
        let ge = boundary_edges(g)?;
        pair_rule(&pe, &ge, &mut counts);
        let linked: BTreeSet<Bounds> = pe
            .keys()
            .chain(ge.keys())
            .flat_map(|(a, b)| [*a, *b])
            .collect();
        let free = |d: &Doc| -> BTreeSet<SpanKey> {
            span_keys(d)
                .into_iter()
                .filter(|(s, e, _)| !linked.contains(&(*s, *e)))
                .collect()
        };
        span_rule(&free(p), &free(g), &mut counts);
    }
    Ok(MetricsReport::from_counts(
        Task::Joint,
        counts,
        "exact-span-pairs",
    ))
}

/// Tuples per doc id.
pub type TableSet = BTreeMap<String, Vec<EvidenceTuple>>;

pub fn tables_from_docs(docs: &[Doc]) -> TableSet {
    docs.iter()
        .map(|d| (d.id.clone(), assemble_table(d).rows))
        .collect()
}

/// Reads every `<doc_id>.csv` in a directory.
pub fn read_table_dir(dir: impl AsRef<Path>) -> Result<TableSet> {
    let dir = dir.as_ref();
    let mut out = TableSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_none_or(|e| e != "csv")
            || path.file_name().is_some_and(|n| n == MANIFEST_NAME)
        {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (_, rows) = parse_csv(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        out.insert(id.to_owned(), rows);
    }
    Ok(out)
}

fn pair_tables<'a>(
    pred: &'a TableSet,
    gold: &'a TableSet,
) -> Result<Vec<(&'a [EvidenceTuple], &'a [EvidenceTuple])>> {
    if let Some(id) = gold.keys().find(|k| !pred.contains_key(*k)) {
        return Err(Error::Pairing(format!(
            "gold table {id:?} has no predicted table"
        )));
    }
    if let Some(id) = pred.keys().find(|k| !gold.contains_key(*k)) {
        return Err(Error::Pairing(format!(
            "predicted table {id:?} has no gold table"
        )));
    }
    Ok(gold
        .iter()
        .map(|(id, g)| (pred[id].as_slice(), g.as_slice()))
        .collect())
}

fn cell_tokens(cell: &str) -> BTreeSet<String> {
    cell.split_whitespace().map(str::to_lowercase).collect()
}

/// Same position, and each gold cell shares a token with the predicted
/// cell; a gold cell without tokens needs a predicted cell without tokens.
pub fn relaxed_match(pred: &EvidenceTuple, gold: &EvidenceTuple) -> bool {
    pred.cells().iter().zip(gold.cells()).all(|(p, g)| {
        let (pt, gt) = (cell_tokens(p), cell_tokens(g));
        if gt.is_empty() {
            pt.is_empty()
        } else {
            !pt.is_disjoint(&gt)
        }
    })
}

/// Maximum bipartite matching (augmenting paths), predicted tuples in order.
fn max_matching(
    pred: &[EvidenceTuple],
    gold: &[EvidenceTuple],
    ok: impl Fn(&EvidenceTuple, &EvidenceTuple) -> bool,
) -> u64 {
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| (0..gold.len()).filter(|&j| ok(p, &gold[j])).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gold.len()];
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(o, adj, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut matched = 0;
    for i in 0..pred.len() {
        let mut seen = vec![false; gold.len()];
        if augment(i, &adj, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

fn eval_tables(
    task: Task,
    pred: &TableSet,
    gold: &TableSet,
    relaxed: bool,
) -> Result<MetricsReport> {
    let mut tuples = MetricCounts::default();
    let mut tables = MetricCounts::default();
    for (p, g) in pair_tables(pred, gold)? {
        let tp = if relaxed {
            max_matching(p, g, relaxed_match)
        } else {
            max_matching(p, g, |a, b| a == b)
        };
        tuples += MetricCounts::new(tp, p.len() as u64 - tp, g.len() as u64 - tp);
        let whole = tp as usize == p.len() && tp as usize == g.len();
        match (p.is_empty(), g.is_empty()) {
            (true, true) => {}
            _ if whole => tables.tp += 1,
            (pe, ge) => {
                tables.fp += u64::from(!pe);
                tables.fn_ += u64::from(!ge);
            }
        }
    }
    let matching = if relaxed {
        "token-overlap"
    } else {
        "exact-tuple"
    };
    let mut report = MetricsReport::from_counts(
        task,
        BTreeMap::from([(TUPLE_LABEL.to_owned(), tuples)]),
        matching,
    );
    report.table_level = Some(tables.into());
    Ok(report)
}

/// Tuples must match cell for cell; each gold tuple matches at most once.
pub fn eval_tab_strict(pred: &TableSet, gold: &TableSet) -> Result<MetricsReport> {
    eval_tables(Task::TabStrict, pred, gold, false)
}

/// Tuples match when every cell overlaps its gold counterpart by a
/// whitespace token (case-insensitive); columns may not be swapped.
pub fn eval_tab_relaxed(pred: &TableSet, gold: &TableSet) -> Result<MetricsReport> {
    eval_tables(Task::TabRelaxed, pred, gold, true)
}

/// Runs any task on predicted and gold Docs, assembling tables for the
/// tabulation tasks.
pub fn evaluate(task: Task, pred: &[Doc], gold: &[Doc]) -> Result<MetricsReport> {
    match task {
        Task::Ner => eval_ner(pred, gold),
        Task::ReGold => eval_re_gold(pred, gold),
        Task::Joint => eval_joint(pred, gold),
        Task::TabStrict | Task::TabRelaxed => {
            pair_docs(pred, gold)?;
            let (p, g) = (tables_from_docs(pred), tables_from_docs(gold));
            eval_tables(task, &p, &g, task == Task::TabRelaxed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Axis labels, shared by gold rows and predicted columns; `NONE` last.
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn bump(&mut self, gold: usize, pred: usize) {
        self.counts[gold][pred] += 1;
    }

    pub fn get(&self, gold: &str, pred: &str) -> u64 {
        let i = self.labels.iter().position(|l| l == gold);
        let j = self.labels.iter().position(|l| l == pred);
        match (i, j) {
            (Some(i), Some(j)) => self.counts[i][j],
            _ => 0,
        }
    }

    /// Rows divided by their totals; all-zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if total == 0 {
                            0.0
                        } else {
                            c as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self, normalized: bool) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["gold\\pred".to_owned()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        let norm = self.normalized();
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            if normalized {
                rec.extend(norm[i].iter().map(|v| format!("{v:.4}")));
            } else {
                rec.extend(self.counts[i].iter().map(u64::to_string));
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

fn axis<L: fmt::Display>(labels: impl IntoIterator<Item = L>) -> Vec<String> {
    labels
        .into_iter()
        .map(|l| l.to_string())
        .chain(std::iter::once(NONE_LABEL.to_owned()))
        .collect()
}

fn token_classes(doc: &Doc) -> Vec<usize> {
    let mut out = vec![EntityLabel::ALL.len(); doc.tokens.len()];
    for s in &doc.entities {
        let class = EntityLabel::ALL
            .iter()
            .position(|l| *l == s.label)
            .expect("schema label");
        let end = (s.token_end + 1).min(out.len());
        out[s.token_start.min(end)..end].fill(class);
    }
    out
}

/// Gold token class against predicted token class.
pub fn confusion_ner(pred: &[Doc], gold: &[Doc]) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(axis(EntityLabel::ALL));
    for (p, g) in pair_docs(pred, gold)? {
        if p.tokens.len() != g.tokens.len() {
            return Err(Error::Pairing(format!(
                "doc {}: {} predicted tokens against {} gold tokens",
                g.id,
                p.tokens.len(),
                g.tokens.len()
            )));
        }
        for (gc, pc) in token_classes(g).into_iter().zip(token_classes(p)) {
            m.bump(gc, pc);
        }
    }
    Ok(m)
}

/// Gold relation label against predicted label for every ordered pair that
/// carries an edge on either side.
pub fn confusion_re(pred: &[Doc], gold: &[Doc]) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(axis(RelationLabel::ALL));
    let none = RelationLabel::ALL.len();
    for (p, g) in pair_docs(pred, gold)? {
        let pe = boundary_edges(p)?;
        let ge = boundary_edges(g)?;
        let keys: BTreeSet<_> = pe.keys().chain(ge.keys()).collect();
        let empty = BTreeSet::new();
        for k in keys {
            let ps = pe.get(k).unwrap_or(&empty);
            let gs = ge.get(k).unwrap_or(&empty);
            for l in ps.intersection(gs) {
                m.bump(l.index(), l.index());
            }
            let mut p_rest = ps.difference(gs).map(|l| l.index());
            let mut g_rest = gs.difference(ps).map(|l| l.index());
            loop {
                match (g_rest.next(), p_rest.next()) {
                    (None, None) => break,
                    (gi, pi) => m.bump(gi.unwrap_or(none), pi.unwrap_or(none)),
                }
            }
        }
    }
    Ok(m)
}
