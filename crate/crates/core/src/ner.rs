//! Transition-based entity recognizer.
//!
//! Tokens move from a buffer either straight to the output (`Out`, `Unit`)
//! or onto an entity stack (`Begin`, `In`) that `Last` flushes as one span.
//! Each action consumes exactly one buffered token, so a T-token sentence
//! takes exactly T steps.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Doc, EntityLabel, EntitySpan};
use crate::error::{Error, Result};
use crate::evaluate::eval_ner;
use crate::features::{BackendKind, FeatureSource, Input, InputBuilder, TokenVector};
use crate::linear::{masked_softmax, Adam, Gradient, Linear, Optimizer, Sgd};
use crate::train::{drop_features, fit, Batches, TrainConfig, TrainingLog};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Declaration order is the tie-break order for equal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Out,
    Unit,
    Begin,
    In,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    /// `None` exactly for `Out`.
    pub label: Option<EntityLabel>,
}

impl Action {
    pub const OUT: Action = Action {
        kind: ActionKind::Out,
        label: None,
    };

    pub fn new(kind: ActionKind, label: EntityLabel) -> Self {
        Action {
            kind,
            label: Some(label),
        }
    }

    /// All 13 actions in tie-break order.
    pub fn all() -> Vec<Action> {
        let mut labels = EntityLabel::ALL.to_vec();
        labels.sort();
        let mut out = vec![Action::OUT];
        for kind in [
            ActionKind::Unit,
            ActionKind::Begin,
            ActionKind::In,
            ActionKind::Last,
        ] {
            out.extend(labels.iter().map(|&l| Action::new(kind, l)));
        }
        out
    }

    pub fn index(&self) -> usize {
        let label = |l: Option<EntityLabel>| l.map_or(0, |l| l as usize);
        match self.kind {
            ActionKind::Out => 0,
            ActionKind::Unit => 1 + label(self.label),
            ActionKind::Begin => 4 + label(self.label),
            ActionKind::In => 7 + label(self.label),
            ActionKind::Last => 10 + label(self.label),
        }
    }
}

pub const N_ACTIONS: usize = 13;

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label {
            Some(l) => write!(f, "{:?}-{l}", self.kind),
            None => write!(f, "{:?}", self.kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParserState {
    n_tokens: usize,
    /// Index of the buffer front; the buffer is `next..n_tokens`.
    next: usize,
    stack: Vec<usize>,
    open: Option<EntityLabel>,
    output: Vec<EntitySpan>,
    outside: Vec<usize>,
    prev: Option<Action>,
}

impl ParserState {
    pub fn new(n_tokens: usize) -> Self {
        ParserState {
            n_tokens,
            next: 0,
            stack: Vec::new(),
            open: None,
            output: Vec::new(),
            outside: Vec::new(),
            prev: None,
        }
    }

    pub fn buffer(&self) -> std::ops::Range<usize> {
        self.next..self.n_tokens
    }

    pub fn buffer_len(&self) -> usize {
        self.n_tokens - self.next
    }

    pub fn stack(&self) -> &[usize] {
        &self.stack
    }

    pub fn open_label(&self) -> Option<EntityLabel> {
        self.open
    }

    pub fn output(&self) -> &[EntitySpan] {
        &self.output
    }

    /// Tokens emitted unlabelled.
    pub fn outside(&self) -> &[usize] {
        &self.outside
    }

    pub fn previous(&self) -> Option<Action> {
        self.prev
    }

    pub fn is_terminal(&self) -> bool {
        self.buffer_len() == 0 && self.stack.is_empty()
    }

    pub fn apply(&mut self, action: Action) -> Result<()> {
        if !valid_actions(self).contains(&action) {
            return Err(Error::Contract(format!(
                "{action} is not valid with {} buffered tokens and {} on the stack",
                self.buffer_len(),
                self.stack.len()
            )));
        }
        let t = self.next;
        self.next += 1;
        match action.kind {
            ActionKind::Out => self.outside.push(t),
            ActionKind::Unit => {
                self.output
                    .push(EntitySpan::new(action.label.expect("labelled"), t, t))
            }
            ActionKind::Begin => {
                self.stack.push(t);
                self.open = action.label;
            }
            ActionKind::In => self.stack.push(t),
            ActionKind::Last => {
                let start = self.stack[0];
                self.output
                    .push(EntitySpan::new(action.label.expect("labelled"), start, t));
                self.stack.clear();
                self.open = None;
            }
        }
        self.prev = Some(action);
        Ok(())
    }
}

/// Valid actions in tie-break order.
///
/// With the stack empty: `Out` and `Unit`, plus `Begin` when a second token
/// remains to close the entity. With an entity open: `Last`, plus `In` when
/// a further token remains after the current one.
pub fn valid_actions(state: &ParserState) -> Vec<Action> {
    let remaining = state.buffer_len();
    if remaining == 0 {
        return Vec::new();
    }
    let mut labels = EntityLabel::ALL.to_vec();
    labels.sort();
    match state.open {
        None => {
            let mut out = vec![Action::OUT];
            out.extend(labels.iter().map(|&l| Action::new(ActionKind::Unit, l)));
            if remaining >= 2 {
                out.extend(labels.iter().map(|&l| Action::new(ActionKind::Begin, l)));
            }
            out
        }
        Some(l) if remaining >= 2 => vec![
            Action::new(ActionKind::In, l),
            Action::new(ActionKind::Last, l),
        ],
        Some(l) => vec![Action::new(ActionKind::Last, l)],
    }
}

pub fn apply_action(state: &ParserState, action: Action) -> Result<ParserState> {
    let mut next = state.clone();
    next.apply(action)?;
    Ok(next)
}

/// The action sequence that rebuilds `doc`'s entities.
pub fn oracle_actions(doc: &Doc) -> Result<Vec<Action>> {
    let mut spans = doc.entities.clone();
    spans.sort();
    for s in &spans {
        if s.token_start > s.token_end || s.token_end >= doc.tokens.len() {
            return Err(Error::Integrity(format!(
                "doc {}: span {}..{} outside {} tokens",
                doc.id,
                s.token_start,
                s.token_end,
                doc.tokens.len()
            )));
        }
    }
    if let Some(w) = spans.windows(2).find(|w| w[0].overlaps(&w[1])) {
        return Err(Error::Integrity(format!(
            "doc {}: spans {}..{} and {}..{} overlap",
            doc.id, w[0].token_start, w[0].token_end, w[1].token_start, w[1].token_end
        )));
    }
    let mut actions = Vec::with_capacity(doc.tokens.len());
    let mut t = 0;
    for s in spans {
        actions.extend(std::iter::repeat_n(Action::OUT, s.token_start - t));
        if s.token_start == s.token_end {
            actions.push(Action::new(ActionKind::Unit, s.label));
        } else {
            actions.push(Action::new(ActionKind::Begin, s.label));
            actions.extend(std::iter::repeat_n(
                Action::new(ActionKind::In, s.label),
                s.len() - 2,
            ));
            actions.push(Action::new(ActionKind::Last, s.label));
        }
        t = s.token_end + 1;
    }
    actions.extend(std::iter::repeat_n(Action::OUT, doc.tokens.len() - t));
    Ok(actions)
}

/// Replays `actions` from the initial state.
pub fn replay(n_tokens: usize, actions: &[Action]) -> Result<ParserState> {
    let mut state = ParserState::new(n_tokens);
    for &a in actions {
        state.apply(a)?;
    }
    Ok(state)
}

/// Scorer input for a state: token slots for buffer[0..3], stack top and
/// stack first, plus previous action, open label and stack length.
fn state_input(state: &ParserState, vectors: &[TokenVector], backend: BackendKind) -> Input {
    let mut b = InputBuilder::new(backend);
    for (slot, t) in state.buffer().take(3).enumerate() {
        b.slot(slot as u32, &vectors[t]);
    }
    if let (Some(&first), Some(&top)) = (state.stack.first(), state.stack.last()) {
        b.slot(3, &vectors[top]);
        b.slot(4, &vectors[first]);
    }
    let remaining = state.buffer_len();
    if remaining < 3 {
        b.categorical(&format!("buffer_end={remaining}"));
    }
    b.categorical(&format!(
        "prev={}",
        state.prev.map_or("<start>".to_owned(), |a| a.to_string())
    ));
    b.categorical(&format!(
        "open={}",
        state.open.map_or("-", EntityLabel::as_str)
    ));
    b.categorical(&format!("stack_len={}", state.stack.len().min(3)));
    b.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerModel {
    pub format_version: u32,
    pub labels: Vec<EntityLabel>,
    pub backend: BackendKind,
    pub config: TrainConfig,
    pub weights: Linear,
}

#[derive(Serialize, Deserialize)]
struct NerFile {
    model: String,
    #[serde(flatten)]
    inner: NerModel,
}

impl NerModel {
    pub fn zeros(backend: BackendKind) -> Self {
        NerModel {
            format_version: MODEL_FORMAT_VERSION,
            labels: EntityLabel::ALL.to_vec(),
            backend,
            config: TrainConfig::default().resolved(backend),
            weights: Linear::zeros(N_ACTIONS),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&NerFile {
            model: "ner".into(),
            inner: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: NerFile = serde_json::from_str(s)?;
        if f.model != "ner" {
            return Err(Error::Config(format!(
                "expected an ner model file, found {:?}",
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
        if let Some(l) = EntityLabel::ALL.iter().find(|l| !m.labels.contains(l)) {
            return Err(Error::Config(format!("model label set lacks {l}")));
        }
        if m.weights.n_out != N_ACTIONS {
            return Err(Error::Config(format!(
                "model scores {} actions, expected {N_ACTIONS}",
                m.weights.n_out
            )));
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

    fn decode_vectors(&self, n_tokens: usize, vectors: &[TokenVector]) -> (Vec<EntitySpan>, usize) {
        let mut state = ParserState::new(n_tokens);
        let mut steps = 0;
        while !state.is_terminal() {
            let valid = valid_actions(&state);
            let scores = self
                .weights
                .scores(&state_input(&state, vectors, self.backend));
            let mut best = valid[0];
            for &a in &valid[1..] {
                if scores[a.index()] > scores[best.index()] {
                    best = a;
                }
            }
            state.apply(best).expect("chosen among valid actions");
            steps += 1;
        }
        (state.output, steps)
    }

    /// Greedy decode; returns the Doc with predicted entities and no relations.
    pub fn decode(&self, doc: &Doc, source: &FeatureSource) -> Result<Doc> {
        Ok(self.decode_counting(doc, source)?.0)
    }

    /// As [`NerModel::decode`], also returning the number of actions applied.
    pub fn decode_counting(&self, doc: &Doc, source: &FeatureSource) -> Result<(Doc, usize)> {
        source.check(self.backend)?;
        let vectors = source.token_vectors(doc)?;
        let (entities, steps) = self.decode_vectors(doc.tokens.len(), &vectors);
        let mut out = doc.unannotated();
        out.entities = entities;
        Ok((out, steps))
    }
}

struct StateExample {
    input: Input,
    mask: [bool; N_ACTIONS],
    gold: usize,
}

fn teacher_forced(
    doc: &Doc,
    vectors: &[TokenVector],
    backend: BackendKind,
) -> Result<Vec<StateExample>> {
    let mut state = ParserState::new(doc.tokens.len());
    let mut out = Vec::with_capacity(doc.tokens.len());
    for a in oracle_actions(doc)? {
        let mut mask = [false; N_ACTIONS];
        valid_actions(&state)
            .iter()
            .for_each(|v| mask[v.index()] = true);
        out.push(StateExample {
            input: state_input(&state, vectors, backend),
            mask,
            gold: a.index(),
        });
        state.apply(a)?;
    }
    Ok(out)
}

pub(crate) enum AnyOptimizer {
    Sgd(Sgd),
    Adam(Box<Adam>),
}

impl AnyOptimizer {
    pub fn for_backend(backend: BackendKind, lr: f64) -> Self {
        if backend.is_dense() {
            AnyOptimizer::Adam(Box::new(Adam::new(lr)))
        } else {
            AnyOptimizer::Sgd(Sgd { learning_rate: lr })
        }
    }

    pub fn step(&mut self, model: &mut Linear, grad: &Gradient) {
        match self {
            AnyOptimizer::Sgd(o) => o.step(model, grad),
            AnyOptimizer::Adam(o) => o.step(model, grad),
        }
    }
}

/// Trains the action scorer on teacher-forced oracle states with a softmax
/// loss over valid actions. Early stopping uses dev entity micro-F1.
pub fn train_ner(
    train: &[Doc],
    dev: &[Doc],
    source: &FeatureSource,
    config: &TrainConfig,
) -> Result<(NerModel, TrainingLog)> {
    config.validate()?;
    crate::train::check_dev_ids(dev)?;
    if train.is_empty() {
        return Err(Error::Size("cannot train on an empty training set".into()));
    }
    let backend = source.kind();
    let examples: Vec<Vec<StateExample>> = train
        .iter()
        .map(|d| teacher_forced(d, &source.token_vectors(d)?, backend))
        .collect::<Result<_>>()?;
    let dev_vectors: Vec<Vec<TokenVector>> = dev
        .iter()
        .map(|d| source.token_vectors(d))
        .collect::<Result<_>>()?;

    let mut model = NerModel::zeros(backend);
    model.config = config.resolved(backend);
    let mut opt = AnyOptimizer::for_backend(backend, config.learning_rate_for(backend));
    let mut batches = Batches::new(train.len(), config.batch_size);

    let step = |m: &mut NerModel, rng: &mut _| {
        let batch = batches.next(rng);
        let mut grad = Gradient::new(N_ACTIONS);
        let mut loss = 0.0;
        for &i in &batch {
            for ex in &examples[i] {
                let x = drop_features(&ex.input, config.dropout, rng);
                let mut p = masked_softmax(&m.weights.scores(&x), &ex.mask);
                loss -= p[ex.gold].max(1e-300).ln();
                p[ex.gold] -= 1.0;
                grad.add(&x, &p);
            }
        }
        grad.scale(1.0 / batch.len() as f64);
        opt.step(&mut m.weights, &grad);
        loss / batch.len() as f64
    };
    let mut dev_f1 = |m: &NerModel| {
        let pred: Vec<Doc> = dev
            .iter()
            .zip(&dev_vectors)
            .map(|(d, v)| {
                let mut out = d.unannotated();
                out.entities = m.decode_vectors(d.tokens.len(), v).0;
                out
            })
            .collect();
        eval_ner(&pred, dev).map_or(0.0, |r| r.f1())
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
    log.notes.insert(
        0,
        "training states follow the oracle path (teacher forcing)".into(),
    );
    Ok((best, log))
}
