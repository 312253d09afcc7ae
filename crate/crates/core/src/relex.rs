//! Relation extraction over ordered entity pairs.
//!
//! Every ordered pair of distinct spans whose start tokens lie within
//! `max_pair_distance` of each other is scored against all three relation
//! labels by a linear layer and a sigmoid. A pair receives at most one edge:
//! its highest-probability label, if that probability exceeds the threshold.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Doc, RelationEdge, RelationLabel, SpanId};
use crate::error::{Error, Result};
use crate::evaluate::eval_re_gold;
use crate::features::{pool_mean, BackendKind, FeatureSource, Input, InputBuilder, TokenVector};
use crate::linear::{sigmoid, Gradient, Linear};
use crate::ner::{AnyOptimizer, MODEL_FORMAT_VERSION};
use crate::train::{drop_features, fit, Batches, TrainConfig, TrainingLog};

pub const MAX_PAIR_DISTANCE: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const N_LABELS: usize = 3;

/// Ordered candidate pairs, by parent start then child start.
pub fn candidate_pairs(doc: &Doc, max_pair_distance: usize) -> Vec<(SpanId, SpanId)> {
    let mut ids: Vec<SpanId> = doc.entities.iter().map(|s| s.id()).collect();
    ids.sort();
    let mut out = Vec::new();
    for &p in &ids {
        for &c in &ids {
            if p != c && p.0.abs_diff(c.0) <= max_pair_distance {
                out.push((p, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairInstance {
    pub parent: SpanId,
    pub child: SpanId,
    pub pooled_parent: TokenVector,
    pub pooled_child: TokenVector,
    /// Scorer input: both pooled vectors plus pair-level features.
    pub input: Input,
}

fn distance_bucket(d: i64) -> String {
    let a = d.unsigned_abs();
    let b = match a {
        0..=4 => a.to_string(),
        5..=7 => "5-7".into(),
        8..=15 => "8-15".into(),
        16..=31 => "16-31".into(),
        _ => "32+".into(),
    };
    format!("{}{b}", if d < 0 { "-" } else { "+" })
}

/// Instances for every candidate pair, with mean-pooled span vectors.
pub fn generate_instances(
    doc: &Doc,
    source: &FeatureSource,
    max_pair_distance: usize,
) -> Result<Vec<PairInstance>> {
    let pairs = candidate_pairs(doc, max_pair_distance);
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = source.token_vectors(doc)?;
    instances_from_vectors(doc, &vectors, source.kind(), &pairs)
}

fn instances_from_vectors(
    doc: &Doc,
    vectors: &[TokenVector],
    backend: BackendKind,
    pairs: &[(SpanId, SpanId)],
) -> Result<Vec<PairInstance>> {
    let mut spans = doc.entities.clone();
    spans.sort();
    let pooled: BTreeMap<SpanId, TokenVector> = spans
        .iter()
        .map(|s| {
            let end = s.token_end.min(vectors.len().saturating_sub(1));
            Ok((s.id(), pool_mean(&vectors[s.token_start..=end])?))
        })
        .collect::<Result<_>>()?;
    let ordinal: BTreeMap<SpanId, usize> =
        spans.iter().enumerate().map(|(i, s)| (s.id(), i)).collect();
    let words: Vec<String> = doc.tokens.iter().map(|t| t.text.to_lowercase()).collect();

    pairs
        .iter()
        .map(|&(p, c)| {
            let ps = doc.span(p).expect("pair from this doc");
            let cs = doc.span(c).expect("pair from this doc");
            let mut b = InputBuilder::new(backend);
            b.slot(0, &pooled[&p]);
            b.slot(1, &pooled[&c]);
            b.categorical(&format!(
                "dist={}",
                distance_bucket(c.0 as i64 - p.0 as i64)
            ));
            let (lo, hi) = if ps.token_end < cs.token_start {
                (ps.token_end + 1, cs.token_start)
            } else {
                (cs.token_end + 1, ps.token_start)
            };
            let between = spans
                .iter()
                .filter(|s| s.token_start >= lo && s.token_end < hi)
                .count();
            b.categorical(&format!("between={}", between.min(4)));
            b.categorical(&format!("parent_ord={}", ordinal[&p].min(5)));
            for w in words.get(lo..hi).unwrap_or(&[]) {
                b.categorical(&format!("mid={w}"));
            }
            Ok(PairInstance {
                parent: p,
                child: c,
                pooled_parent: pooled[&p].clone(),
                pooled_child: pooled[&c].clone(),
                input: b.finish(),
            })
        })
        .collect()
}

/// Probabilities per ordered pair, indexed by [`RelationLabel::index`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationMatrix {
    pub probs: BTreeMap<(SpanId, SpanId), [f64; N_LABELS]>,
}

impl RelationMatrix {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, parent: SpanId, child: SpanId) -> Option<&[f64; N_LABELS]> {
        self.probs.get(&(parent, child))
    }

    /// One JSON line per pair: `{doc_id, parent, child, probs}`.
    pub fn to_jsonl(&self, doc_id: &str) -> String {
        let mut out = String::new();
        for (&(p, c), probs) in &self.probs {
            let named: serde_json::Map<String, serde_json::Value> = RelationLabel::ALL
                .iter()
                .map(|l| (l.to_string(), json!(probs[l.index()])))
                .collect();
            out.push_str(
                &json!({"doc_id": doc_id, "parent": p, "child": c, "probs": named}).to_string(),
            );
            out.push('\n');
        }
        out
    }
}

/// Argmax label per pair (ties to the earlier label), kept only when its
/// probability is strictly above `threshold`.
pub fn predict_relations(matrix: &RelationMatrix, threshold: f64) -> Vec<RelationEdge> {
    let mut out = Vec::new();
    for (&(p, c), probs) in &matrix.probs {
        let mut best = 0;
        for k in 1..N_LABELS {
            if probs[k] > probs[best] {
                best = k;
            }
        }
        if probs[best] > threshold {
            out.push(RelationEdge::new(RelationLabel::ALL[best], p, c));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelexModel {
    pub format_version: u32,
    pub labels: Vec<RelationLabel>,
    pub backend: BackendKind,
    pub config: TrainConfig,
    pub max_pair_distance: usize,
    pub threshold: f64,
    pub weights: Linear,
}

#[derive(Serialize, Deserialize)]
struct RelexFile {
    model: String,
    #[serde(flatten)]
    inner: RelexModel,
}

impl RelexModel {
    pub fn zeros(backend: BackendKind) -> Self {
        RelexModel {
            format_version: MODEL_FORMAT_VERSION,
            labels: RelationLabel::ALL.to_vec(),
            backend,
            config: TrainConfig::default().resolved(backend),
            max_pair_distance: MAX_PAIR_DISTANCE,
            threshold: DEFAULT_THRESHOLD,
            weights: Linear::zeros(N_LABELS),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&RelexFile {
            model: "relex".into(),
            inner: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: RelexFile = serde_json::from_str(s)?;
        if f.model != "relex" {
            return Err(Error::Config(format!(
                "expected a relex model file, found {:?}",
                f.model
            )));
        }
        let m = f.inner;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        if m.labels != RelationLabel::ALL || m.weights.n_out != N_LABELS {
            return Err(Error::Config(
                "relex model must score OC_RES, A1_RES, A2_RES in that order".into(),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn matrix(&self, instances: &[PairInstance]) -> RelationMatrix {
        let probs = instances
            .iter()
            .map(|inst| {
                let z = self.weights.scores(&inst.input);
                (
                    (inst.parent, inst.child),
                    [sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2])],
                )
            })
            .collect();
        RelationMatrix { probs }
    }

    pub fn score_pairs(&self, doc: &Doc, source: &FeatureSource) -> Result<RelationMatrix> {
        source.check(self.backend)?;
        Ok(self.matrix(&generate_instances(doc, source, self.max_pair_distance)?))
    }

    /// The Doc with its relations replaced by predictions at `threshold`.
    pub fn annotate(&self, doc: &Doc, source: &FeatureSource, threshold: f64) -> Result<Doc> {
        let mut out = doc.clone();
        out.relations = predict_relations(&self.score_pairs(doc, source)?, threshold);
        Ok(out)
    }
}

/// Free-function form of [`RelexModel::score_pairs`].
pub fn score_pairs(
    doc: &Doc,
    model: &RelexModel,
    source: &FeatureSource,
) -> Result<RelationMatrix> {
    model.score_pairs(doc, source)
}

struct DocExamples {
    instances: Vec<PairInstance>,
    targets: Vec<[f64; N_LABELS]>,
}

fn doc_examples(
    doc: &Doc,
    source: &FeatureSource,
    max_dist: usize,
    notes: &mut Vec<String>,
) -> Result<DocExamples> {
    for e in &doc.relations {
        if doc.span(e.parent).is_none() || doc.span(e.child).is_none() {
            return Err(Error::Integrity(format!(
                "doc {}: gold {} edge {}→{} does not resolve to spans",
                doc.id, e.label, e.parent, e.child
            )));
        }
        if e.parent.0.abs_diff(e.child.0) > max_dist {
            notes.push(format!(
                "doc {}: gold {} edge {}→{} is out of window and contributes no training cell",
                doc.id, e.label, e.parent, e.child
            ));
        }
    }
    let instances = generate_instances(doc, source, max_dist)?;
    let targets = instances
        .iter()
        .map(|inst| {
            let mut y = [0.0; N_LABELS];
            for e in doc
                .relations
                .iter()
                .filter(|e| e.parent == inst.parent && e.child == inst.child)
            {
                y[e.label.index()] = 1.0;
            }
            y
        })
        .collect();
    Ok(DocExamples { instances, targets })
}

/// Trains the pair scorer with squared error over every (instance, label)
/// cell. Early stopping uses dev relation micro-F1 on gold entities.
pub fn train_re(
    train: &[Doc],
    dev: &[Doc],
    source: &FeatureSource,
    config: &TrainConfig,
) -> Result<(RelexModel, TrainingLog)> {
    config.validate()?;
    crate::train::check_dev_ids(dev)?;
    if train.is_empty() {
        return Err(Error::Size("cannot train on an empty training set".into()));
    }
    let backend = source.kind();
    let mut notes = Vec::new();
    let examples: Vec<DocExamples> = train
        .iter()
        .map(|d| doc_examples(d, source, MAX_PAIR_DISTANCE, &mut notes))
        .collect::<Result<_>>()?;
    let dev_instances: Vec<Vec<PairInstance>> = dev
        .iter()
        .map(|d| generate_instances(d, source, MAX_PAIR_DISTANCE))
        .collect::<Result<_>>()?;

    let mut model = RelexModel::zeros(backend);
    model.config = config.resolved(backend);
    let mut opt = AnyOptimizer::for_backend(backend, config.learning_rate_for(backend));
    let mut batches = Batches::new(train.len(), config.batch_size);

    let step = |m: &mut RelexModel, rng: &mut _| {
        let batch = batches.next(rng);
        let mut grad = Gradient::new(N_LABELS);
        let mut loss = 0.0;
        for &i in &batch {
            let ex = &examples[i];
            for (inst, y) in ex.instances.iter().zip(&ex.targets) {
                let x = drop_features(&inst.input, config.dropout, rng);
                let z = m.weights.scores(&x);
                let mut dz = [0.0; N_LABELS];
                for k in 0..N_LABELS {
                    let p = sigmoid(z[k]);
                    loss += (p - y[k]).powi(2);
                    dz[k] = 2.0 * (p - y[k]) * p * (1.0 - p);
                }
                grad.add(&x, &dz);
            }
        }
        grad.scale(1.0 / batch.len() as f64);
        opt.step(&mut m.weights, &grad);
        loss / batch.len() as f64
    };
    let mut dev_f1 = |m: &RelexModel| {
        let pred: Vec<Doc> = dev
            .iter()
            .zip(&dev_instances)
            .map(|(d, inst)| {
                let mut out = d.clone();
                out.relations = predict_relations(&m.matrix(inst), m.threshold);
                out
            })
            .collect();
        eval_re_gold(&pred, dev).map_or(0.0, |r| r.f1())
    };
    let (best, mut log) = fit(
        config,
        &mut model,
        step,
        if dev.is_empty() {
            None
        } else {
            Some(&mut dev_f1)
        },
    );
    notes.append(&mut log.notes);
    log.notes = notes;
    Ok((best, log))
}
