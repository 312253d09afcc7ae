//! Python bindings: `import evitab`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use evitab::corpus::{self, markup::parse_markup};
use evitab::evaluate::{self, Scores};
use evitab::features::load_embeddings;
use evitab::ner::train_ner;
use evitab::relex::{train_re, DEFAULT_THRESHOLD};
use evitab::tabulate::{assemble_table, emit_csv};
use evitab::{
    Doc, EntityLabel, EntitySpan, EvidenceTable, FeatureSource, NerModel, RelationEdge,
    RelationLabel, RelexModel, SpanId, Task, TrainConfig, TrainingLog,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(evitab, EvitabError, PyException);

fn err(e: evitab::Error) -> PyErr {
    EvitabError::new_err(e.to_string())
}

fn docs_of(docs: &[PyRef<'_, PyDoc>]) -> Vec<Doc> {
    docs.iter().map(|d| d.inner.clone()).collect()
}

fn wrap(docs: Vec<Doc>) -> Vec<PyDoc> {
    docs.into_iter().map(|inner| PyDoc { inner }).collect()
}

/// One sentence with its tokens, entities and relations.
#[pyclass(name = "Doc", module = "evitab", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyDoc {
    pub inner: Doc,
}

#[pymethods]
impl PyDoc {
    /// Tokenizes `text` into an unannotated Doc.
    #[new]
    fn new(id: &str, text: &str) -> Self {
        PyDoc {
            inner: Doc::from_text(id, text),
        }
    }

    /// Inline markup: `[INTV latanoprost] ...`.
    #[staticmethod]
    fn from_markup(id: &str, markup: &str) -> PyResult<Self> {
        Ok(PyDoc {
            inner: parse_markup(id, markup).map_err(err)?,
        })
    }

    /// One annotation record (a single JSON line).
    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Self> {
        let mut docs = corpus::read_annotations_str(line).map_err(err)?;
        match docs.len() {
            1 => Ok(PyDoc {
                inner: docs.remove(0),
            }),
            n => Err(EvitabError::new_err(format!(
                "expected one record, got {n}"
            ))),
        }
    }

    fn to_json(&self) -> String {
        corpus::write_annotations_string(std::slice::from_ref(&self.inner))
            .trim_end()
            .to_owned()
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.text
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens.iter().map(|t| t.text.clone()).collect()
    }

    /// `(label, first_token, last_token, text)`, last token inclusive.
    #[getter]
    fn entities(&self) -> Vec<(String, usize, usize, String)> {
        self.inner
            .entities
            .iter()
            .map(|e| {
                let text = self.inner.span_text(e).to_owned();
                (
                    e.label.as_str().to_owned(),
                    e.token_start,
                    e.token_end,
                    text,
                )
            })
            .collect()
    }

    /// `(label, parent_first_token, child_first_token)`.
    #[getter]
    fn relations(&self) -> Vec<(String, usize, usize)> {
        self.inner
            .relations
            .iter()
            .map(|r| (r.label.as_str().to_owned(), r.parent.0, r.child.0))
            .collect()
    }

    #[setter]
    fn set_entities(&mut self, spans: Vec<(String, usize, usize)>) -> PyResult<()> {
        self.inner.entities = spans
            .into_iter()
            .map(|(label, s, e)| Ok(EntitySpan::new(EntityLabel::from_str(&label)?, s, e)))
            .collect::<evitab::Result<_>>()
            .map_err(err)?;
        self.inner.canonicalize();
        Ok(())
    }

    #[setter]
    fn set_relations(&mut self, edges: Vec<(String, usize, usize)>) -> PyResult<()> {
        self.inner.relations = edges
            .into_iter()
            .map(|(label, p, c)| {
                Ok(RelationEdge::new(
                    RelationLabel::from_str(&label)?,
                    SpanId(p),
                    SpanId(c),
                ))
            })
            .collect::<evitab::Result<_>>()
            .map_err(err)?;
        self.inner.canonicalize();
        Ok(())
    }

    fn violations(&self) -> Vec<String> {
        self.inner.violations()
    }

    /// The table assembled from this Doc's own annotations.
    fn table(&self) -> PyTable {
        PyTable {
            inner: assemble_table(&self.inner),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Doc(id={:?}, tokens={}, entities={}, relations={})",
            self.inner.id,
            self.inner.tokens.len(),
            self.inner.entities.len(),
            self.inner.relations.len()
        )
    }
}

/// Hashed token features or precomputed embeddings.
#[pyclass(name = "FeatureSource", module = "evitab", skip_from_py_object)]
#[derive(Clone)]
pub struct PyFeatureSource {
    inner: FeatureSource,
}

#[pymethods]
impl PyFeatureSource {
    #[staticmethod]
    #[pyo3(signature = (bits = evitab::features::DEFAULT_BUCKET_BITS))]
    fn hashed(bits: u32) -> Self {
        PyFeatureSource {
            inner: FeatureSource::hashed(bits),
        }
    }

    /// Loads a token-vector JSONL file.
    #[staticmethod]
    fn embeddings(path: PathBuf) -> PyResult<Self> {
        Ok(PyFeatureSource {
            inner: FeatureSource::embeddings(load_embeddings(path).map_err(err)?),
        })
    }

    fn __repr__(&self) -> String {
        format!("FeatureSource({:?})", self.inner.kind())
    }
}

fn train_config(
    seed: u64,
    max_steps: Option<usize>,
    patience: Option<usize>,
    eval_interval: Option<usize>,
    batch_size: Option<usize>,
    dropout: Option<f64>,
    learning_rate: Option<f64>,
) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        learning_rate,
        ..TrainConfig::default()
    };
    if let Some(v) = max_steps {
        c.max_steps = v;
        c.patience_steps = c.patience_steps.min(v);
    }
    if let Some(v) = patience {
        c.patience_steps = v;
    }
    if let Some(v) = eval_interval {
        c.eval_interval = v;
    }
    if let Some(v) = batch_size {
        c.batch_size = v;
    }
    if let Some(v) = dropout {
        c.dropout = v;
    }
    c
}

/// Step, loss and dev F1 per evaluation, plus the best step.
#[pyclass(name = "TrainingLog", module = "evitab", get_all)]
pub struct PyTrainingLog {
    best_step: usize,
    steps_run: usize,
    entries: Vec<(usize, f64, Option<f64>)>,
    notes: Vec<String>,
}

impl From<TrainingLog> for PyTrainingLog {
    fn from(log: TrainingLog) -> Self {
        PyTrainingLog {
            best_step: log.best_step,
            steps_run: log.steps_run,
            entries: log
                .entries
                .iter()
                .map(|e| (e.step, e.loss, e.dev_f1))
                .collect(),
            notes: log.notes,
        }
    }
}

#[pyclass(name = "NerModel", module = "evitab", skip_from_py_object)]
#[derive(Clone)]
pub struct PyNerModel {
    inner: NerModel,
}

#[pymethods]
impl PyNerModel {
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (train, dev, source, *, seed = 0, max_steps = None, patience = None,
        eval_interval = None, batch_size = None, dropout = None, learning_rate = None))]
    fn train(
        py: Python<'_>,
        train: Vec<PyRef<'_, PyDoc>>,
        dev: Vec<PyRef<'_, PyDoc>>,
        source: &PyFeatureSource,
        seed: u64,
        max_steps: Option<usize>,
        patience: Option<usize>,
        eval_interval: Option<usize>,
        batch_size: Option<usize>,
        dropout: Option<f64>,
        learning_rate: Option<f64>,
    ) -> PyResult<(Self, PyTrainingLog)> {
        let config = train_config(
            seed,
            max_steps,
            patience,
            eval_interval,
            batch_size,
            dropout,
            learning_rate,
        );
        let (train, dev, source) = (docs_of(&train), docs_of(&dev), source.inner.clone());
        let (inner, log) = py
            .detach(|| train_ner(&train, &dev, &source, &config))
            .map_err(err)?;
        Ok((PyNerModel { inner }, log.into()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNerModel {
            inner: NerModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyNerModel {
            inner: NerModel::from_json(s).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// A copy of `doc` with predicted entities and no relations.
    fn decode(&self, doc: &PyDoc, source: &PyFeatureSource) -> PyResult<PyDoc> {
        Ok(PyDoc {
            inner: self.inner.decode(&doc.inner, &source.inner).map_err(err)?,
        })
    }
}

#[pyclass(name = "RelexModel", module = "evitab", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRelexModel {
    inner: RelexModel,
}

#[pymethods]
impl PyRelexModel {
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (train, dev, source, *, seed = 0, max_steps = None, patience = None,
        eval_interval = None, batch_size = None, dropout = None, learning_rate = None))]
    fn train(
        py: Python<'_>,
        train: Vec<PyRef<'_, PyDoc>>,
        dev: Vec<PyRef<'_, PyDoc>>,
        source: &PyFeatureSource,
        seed: u64,
        max_steps: Option<usize>,
        patience: Option<usize>,
        eval_interval: Option<usize>,
        batch_size: Option<usize>,
        dropout: Option<f64>,
        learning_rate: Option<f64>,
    ) -> PyResult<(Self, PyTrainingLog)> {
        let config = train_config(
            seed,
            max_steps,
            patience,
            eval_interval,
            batch_size,
            dropout,
            learning_rate,
        );
        let (train, dev, source) = (docs_of(&train), docs_of(&dev), source.inner.clone());
        let (inner, log) = py
            .detach(|| train_re(&train, &dev, &source, &config))
            .map_err(err)?;
        Ok((PyRelexModel { inner }, log.into()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRelexModel {
            inner: RelexModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyRelexModel {
            inner: RelexModel::from_json(s).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Label scores per candidate pair: `{(parent, child): [OC_RES, A1_RES, A2_RES]}`.
    fn score_pairs(
        &self,
        doc: &PyDoc,
        source: &PyFeatureSource,
    ) -> PyResult<BTreeMap<(usize, usize), [f64; 3]>> {
        let m = self
            .inner
            .score_pairs(&doc.inner, &source.inner)
            .map_err(err)?;
        Ok(m.probs
            .into_iter()
            .map(|((p, c), s)| ((p.0, c.0), s))
            .collect())
    }

    /// A copy of `doc` with its relations replaced by predictions.
    #[pyo3(signature = (doc, source, threshold = DEFAULT_THRESHOLD))]
    fn annotate(&self, doc: &PyDoc, source: &PyFeatureSource, threshold: f64) -> PyResult<PyDoc> {
        Ok(PyDoc {
            inner: self
                .inner
                .annotate(&doc.inner, &source.inner, threshold)
                .map_err(err)?,
        })
    }
}

#[pyclass(name = "EvidenceTable", module = "evitab", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTable {
    inner: EvidenceTable,
}

#[pymethods]
impl PyTable {
    #[getter]
    fn doc_id(&self) -> &str {
        &self.inner.doc_id
    }

    #[getter]
    fn header(&self) -> [String; 3] {
        self.inner.header().map(str::to_owned)
    }

    #[getter]
    fn rows(&self) -> Vec<(String, String, String)> {
        self.inner
            .rows
            .iter()
            .map(|t| (t.outcome.clone(), t.arm1.clone(), t.arm2.clone()))
            .collect()
    }

    #[getter]
    fn diagnostics(&self) -> Vec<String> {
        self.inner.diagnostics.clone()
    }

    fn to_csv(&self) -> String {
        emit_csv(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }
}

/// NER, then RE, then table assembly.
#[pyclass(name = "Pipeline", module = "evitab")]
pub struct PyPipeline {
    inner: evitab::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (ner, re, source, threshold = DEFAULT_THRESHOLD))]
    fn new(
        ner: &PyNerModel,
        re: &PyRelexModel,
        source: &PyFeatureSource,
        threshold: f64,
    ) -> PyResult<Self> {
        Ok(PyPipeline {
            inner: evitab::Pipeline::new(
                ner.inner.clone(),
                re.inner.clone(),
                source.inner.clone(),
                threshold,
            )
            .map_err(err)?,
        })
    }

    fn annotate(&self, doc: &PyDoc) -> PyResult<PyDoc> {
        Ok(PyDoc {
            inner: self.inner.annotate(&doc.inner).map_err(err)?,
        })
    }

    /// Accepts a Doc or a raw sentence.
    fn table(&self, doc: &Bound<'_, PyAny>) -> PyResult<PyTable> {
        let doc = match doc.cast::<PyDoc>() {
            Ok(d) => d.borrow().inner.clone(),
            Err(_) => Doc::from_text("input:0", doc.extract::<String>()?),
        };
        Ok(PyTable {
            inner: self.inner.table(&doc).map_err(err)?,
        })
    }
}

/// Overall and per-label precision, recall and F1.
#[pyclass(name = "MetricsReport", module = "evitab")]
pub struct PyReport {
    inner: evaluate::MetricsReport,
}

fn prf(s: &Scores) -> (f64, f64, f64) {
    (s.p, s.r, s.f1)
}

#[pymethods]
impl PyReport {
    #[getter]
    fn task(&self) -> &str {
        &self.inner.task
    }

    #[getter]
    fn precision(&self) -> f64 {
        self.inner.overall.p
    }

    #[getter]
    fn recall(&self) -> f64 {
        self.inner.overall.r
    }

    #[getter]
    fn f1(&self) -> f64 {
        self.inner.overall.f1
    }

    /// `(tp, fp, fn)`.
    #[getter]
    fn counts(&self) -> (u64, u64, u64) {
        let s = &self.inner.overall;
        (s.tp, s.fp, s.fn_)
    }

    #[getter]
    fn per_label(&self) -> Vec<(String, (f64, f64, f64))> {
        self.inner
            .per_label
            .iter()
            .map(|(k, s)| (k.clone(), prf(s)))
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_table(&self) -> String {
        self.inner.to_table()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.overall;
        format!(
            "MetricsReport(task={:?}, p={:.4}, r={:.4}, f1={:.4})",
            self.inner.task, s.p, s.r, s.f1
        )
    }
}

/// Scores `pred` against `gold`; task is ner, re-gold, joint, tab-strict or tab-relaxed.
#[pyfunction]
#[pyo3(name = "evaluate")]
fn evaluate_docs(
    task: &str,
    pred: Vec<PyRef<'_, PyDoc>>,
    gold: Vec<PyRef<'_, PyDoc>>,
) -> PyResult<PyReport> {
    let task = Task::from_str(task).map_err(err)?;
    Ok(PyReport {
        inner: evaluate::evaluate(task, &docs_of(&pred), &docs_of(&gold)).map_err(err)?,
    })
}

#[pyfunction]
fn read_annotations(path: PathBuf) -> PyResult<Vec<PyDoc>> {
    Ok(wrap(corpus::read_annotations(path).map_err(err)?))
}

#[pyfunction]
fn write_annotations(docs: Vec<PyRef<'_, PyDoc>>, path: PathBuf) -> PyResult<()> {
    corpus::write_annotations(&docs_of(&docs), path).map_err(err)
}

/// Seeded split into `(train, dev, test)`.
#[pyfunction]
#[pyo3(signature = (docs, ratios = corpus::DEFAULT_RATIOS, seed = 0))]
fn split_dataset(
    docs: Vec<PyRef<'_, PyDoc>>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(Vec<PyDoc>, Vec<PyDoc>, Vec<PyDoc>)> {
    let s = corpus::split_dataset(docs_of(&docs), ratios, seed).map_err(err)?;
    Ok((wrap(s.train), wrap(s.dev), wrap(s.test)))
}

/// Sentences of an abstract as `(start, end, text)` char offsets.
#[pyfunction]
fn segment_sentences(text: &str) -> Vec<(usize, usize, String)> {
    corpus::segment_sentences(text)
        .into_iter()
        .map(|s| (s.start, s.end, s.text))
        .collect()
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<(String, usize, usize)> {
    corpus::tokenize(text)
        .into_iter()
        .map(|t| (t.text, t.start, t.end))
        .collect()
}

pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EvitabError", m.py().get_type::<EvitabError>())?;
    m.add_class::<PyDoc>()?;
    m.add_class::<PyFeatureSource>()?;
    m.add_class::<PyTrainingLog>()?;
    m.add_class::<PyNerModel>()?;
    m.add_class::<PyRelexModel>()?;
    m.add_class::<PyTable>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(evaluate_docs, m)?)?;
    m.add_function(wrap_pyfunction!(read_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(write_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(segment_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    Ok(())
}

#[pymodule]
#[pyo3(name = "evitab")]
fn evitab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
