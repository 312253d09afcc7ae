//! Training configuration and the early-stopping loop shared by both
//! classifiers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BackendKind, Input};

pub const SPARSE_LEARNING_RATE: f64 = 0.1;
pub const DENSE_LEARNING_RATE: f64 = 5e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Docs per step.
    pub batch_size: usize,
    pub dropout: f64,
    /// `None` picks the backend default.
    pub learning_rate: Option<f64>,
    pub patience_steps: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            dropout: 0.2,
            learning_rate: None,
            patience_steps: 1000,
            max_steps: 20000,
            eval_interval: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.batch_size == 0
            || self.max_steps == 0
            || self.eval_interval == 0
            || self.patience_steps == 0
        {
            return bad("batch_size, max_steps, eval_interval and patience_steps must be positive");
        }
        if self.patience_steps > self.max_steps {
            return bad("patience_steps exceeds max_steps");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning_rate must be positive");
            }
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, backend: BackendKind) -> f64 {
        self.learning_rate.unwrap_or(if backend.is_dense() {
            DENSE_LEARNING_RATE
        } else {
            SPARSE_LEARNING_RATE
        })
    }

    /// Copy with the learning rate made explicit, as stored in model files.
    pub fn resolved(&self, backend: BackendKind) -> TrainConfig {
        TrainConfig {
            learning_rate: Some(self.learning_rate_for(backend)),
            ..self.clone()
        }
    }

    /// Flat `key=value` lines.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            (
                "learning_rate".into(),
                self.learning_rate.map_or("auto".into(), |l| l.to_string()),
            ),
            ("patience_steps".into(), self.patience_steps.to_string()),
            ("max_steps".into(), self.max_steps.to_string()),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Free-form remarks (out-of-window edges, stop reason).
    pub notes: Vec<String>,
    pub best_step: usize,
    pub steps_run: usize,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Cycles through shuffled epochs of `0..n`, `batch` indices at a time.
pub(crate) struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batches {
    pub fn new(n: usize, batch: usize) -> Self {
        Batches {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Inverted feature dropout: each feature is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`.
/// Dev Docs are scored by id, so ids must be unique.
pub(crate) fn check_dev_ids(dev: &[crate::corpus::Doc]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    match dev.iter().find(|d| !seen.insert(d.id.as_str())) {
        Some(d) => Err(Error::Pairing(format!("duplicate dev doc id {:?}", d.id))),
        None => Ok(()),
    }
}

pub(crate) fn drop_features(x: &Input, rate: f64, rng: &mut ChaCha8Rng) -> Input {
    if rate == 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    x.iter()
        .filter(|_| rng.random::<f64>() >= rate)
        .map(|&(k, v)| (k, v * keep))
        .collect()
}

/// Runs `step` until early stopping fires or `max_steps` is reached.
///
/// Every `eval_interval` steps the dev score is computed; a score counts as
/// an improvement only if strictly greater than the best so far. Training
/// stops once `patience_steps` steps have passed since the best evaluation,
/// and the best-scoring model is returned. With no dev scorer, training runs
/// to `max_steps` and the final model is returned.
pub(crate) fn fit<M: Clone>(
    config: &TrainConfig,
    model: &mut M,
    mut step: impl FnMut(&mut M, &mut ChaCha8Rng) -> f64,
    mut dev_score: Option<&mut dyn FnMut(&M) -> f64>,
) -> (M, TrainingLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, M)> = None;
    let mut loss_sum = 0.0;
    let mut loss_n = 0;
    for s in 1..=config.max_steps {
        loss_sum += step(model, &mut rng);
        loss_n += 1;
        log.steps_run = s;
        if s % config.eval_interval != 0 && s != config.max_steps {
            continue;
        }
        let loss = loss_sum / loss_n as f64;
        loss_sum = 0.0;
        loss_n = 0;
        let Some(score) = dev_score.as_mut() else {
            log.entries.push(LogEntry {
                step: s,
                loss,
                dev_f1: None,
            });
            continue;
        };
        let f1 = score(model);
        log.entries.push(LogEntry {
            step: s,
            loss,
            dev_f1: Some(f1),
        });
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, s, model.clone()));
        }
        let best_step = best.as_ref().map_or(0, |b| b.1);
        if s - best_step >= config.patience_steps {
            log.notes.push(format!(
                "early stop at step {s}: no dev improvement since step {best_step}"
            ));
            break;
        }
    }
    match best {
        Some((f1, s, m)) => {
            log.best_step = s;
            log.notes.push(format!("best dev f1 {f1:.4} at step {s}"));
            (m, log)
        }
        None => {
            log.best_step = log.steps_run;
            log.notes.push("no dev set: early stopping disabled".into());
            (model.clone(), log)
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn duplicate_dev_ids_are_refused() {
        let d = crate::corpus::Doc::from_text("a:0", "x");
        assert!(super::check_dev_ids(&[d.clone(), d.clone()]).is_err());
        assert!(super::check_dev_ids(&[d]).is_ok());
    }

    use super::*;

    fn cfg(patience: usize, interval: usize, max: usize) -> TrainConfig {
        TrainConfig {
            patience_steps: patience,
            eval_interval: interval,
            max_steps: max,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert!(cfg(10, 1, 5).validate().is_err());
        let lr = TrainConfig::default();
        assert_eq!(lr.learning_rate_for(BackendKind::Hashed { bits: 20 }), 0.1);
        assert_eq!(
            lr.learning_rate_for(BackendKind::Embeddings { dim: 8 }),
            5e-5
        );
    }

    #[test]
    fn constant_dev_score_stops_after_two_evaluations() {
        let mut evals = 0;
        let mut dev = |_: &u32| {
            evals += 1;
            0.5
        };
        let mut model = 0u32;
        let (_, log) = fit(
            &cfg(1, 1, 100),
            &mut model,
            |m, _| {
                *m += 1;
                1.0
            },
            Some(&mut dev),
        );
        assert_eq!(evals, 2);
        assert_eq!(log.entries.len(), 2);
        assert_eq!(model, 2);
    }

    #[test]
    fn best_model_is_returned() {
        let scores = [0.1, 0.9, 0.3, 0.3, 0.3];
        let mut i = 0;
        let mut dev = |_: &u32| {
            i += 1;
            scores[i - 1]
        };
        let mut model = 0u32;
        let (best, log) = fit(
            &cfg(2, 1, 100),
            &mut model,
            |m, _| {
                *m += 1;
                0.0
            },
            Some(&mut dev),
        );
        assert_eq!(best, 2);
        assert_eq!(log.best_step, 2);
        assert_eq!(log.steps_run, 4);
    }

    #[test]
    fn no_dev_runs_to_max_steps() {
        let mut model = 0u32;
        let (last, log) = fit(
            &cfg(5, 3, 10),
            &mut model,
            |m, _| {
                *m += 1;
                0.0
            },
            None,
        );
        assert_eq!(last, 10);
        assert_eq!(
            log.entries.iter().map(|e| e.step).collect::<Vec<_>>(),
            vec![3, 6, 9, 10]
        );
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Batches::new(5, 64);
        let mut first = b.next(&mut rng);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let mut b = Batches::new(6, 4);
        let mut seen = b.next(&mut rng);
        seen.extend(&b.next(&mut rng)[..2]);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn dropout_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![(1, 1.0), (2, 2.0)];
        assert_eq!(drop_features(&x, 0.0, &mut rng), x);
        let dropped = drop_features(&x, 0.5, &mut rng);
        assert!(dropped.iter().all(|(_, v)| *v == 2.0 || *v == 4.0));
    }
}
