use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

const CORPUS: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/corpus.jsonl"
);

/// Runs `code` with `evitab` importable and `CORPUS` bound.
fn run(code: &str) -> PyResult<()> {
    Python::attach(|py| {
        let m = PyModule::new(py, "evitab")?;
        evitab_py::register(&m)?;
        py.import("sys")?
            .getattr("modules")?
            .set_item("evitab", &m)?;
        let globals = PyDict::new(py);
        globals.set_item("CORPUS", CORPUS)?;
        py.run(&CString::new(code).unwrap(), Some(&globals), None)
    })
}

#[test]
fn doc_round_trips() {
    run(r#"
import evitab
d = evitab.Doc.from_markup("1:0", "[Latanoprost]{INTV:a} lowered [IOP]{OC:o} by [8.6 mm Hg]{MEAS:m} . || o>m:OC_RES a>m:A1_RES")
assert d.tokens == ["Latanoprost", "lowered", "IOP", "by", "8.6", "mm", "Hg", "."], d.tokens
assert d.entities == [("INTV", 0, 0, "Latanoprost"), ("OC", 2, 2, "IOP"), ("MEAS", 4, 6, "8.6 mm Hg")]
assert sorted(d.relations) == [("A1_RES", 0, 4), ("OC_RES", 2, 4)]
assert evitab.Doc.from_json(d.to_json()) == d
t = d.table()
assert t.header == ["outcome", "Latanoprost", ""]
assert t.rows == [("IOP", "8.6 mm Hg", "")]
assert t.to_csv().splitlines()[0] == "outcome,Latanoprost,"
assert d.violations() == []
d.entities = [("OC", 2, 3), ("MEAS", 3, 4)]
assert d.violations(), "overlap must be reported"
"#)
    .unwrap();
}

#[test]
fn errors_raise_evitab_error() {
    run(r#"
import evitab
for bad in [lambda: evitab.Doc.from_json("{"),
            lambda: evitab.evaluate("nope", [], []),
            lambda: evitab.Doc.from_markup("x", "[a]{BOGUS:x}")]:
    try:
        bad()
    except evitab.EvitabError:
        pass
    else:
        raise AssertionError("no error")
"#)
    .unwrap();
}

#[test]
fn train_predict_evaluate() {
    run(r#"
import evitab
docs = evitab.read_annotations(CORPUS)
train, dev, test = evitab.split_dataset(docs, (0.8, 0.1, 0.1), seed=3)
assert len(train) + len(dev) + len(test) == len(docs)
src = evitab.FeatureSource.hashed(18)
ner, log = evitab.NerModel.train(docs, docs, src, max_steps=200, eval_interval=10)
assert log.steps_run <= 200 and log.entries
re, _ = evitab.RelexModel.train(docs, docs, src, max_steps=200, eval_interval=10)
assert evitab.NerModel.from_json(ner.to_json()).to_json() == ner.to_json()

pipe = evitab.Pipeline(ner, re, src)
pred = [pipe.annotate(evitab.Doc(d.id, d.text)) for d in docs]
r = evitab.evaluate("ner", pred, docs)
assert r.f1 > 0.9, r
assert r.task == "ner" and dict(r.per_label).keys() == {"INTV", "OC", "MEAS"}
tp, fp, fn = r.counts
assert tp + fn == sum(len(d.entities) for d in docs)

gold_ents = [ner.decode(d, src) for d in docs]
scores = re.score_pairs(gold_ents[0], src)
assert all(len(v) == 3 and all(0 <= p <= 1 for p in v) for v in scores.values())
t = pipe.table(docs[0].text)
assert t.doc_id == "input:0" and len(t) >= 1
"#)
    .unwrap();
}
