//! Multi-output linear scorer over sparse inputs, with plain gradient
//! descent and a lazy Adam update.

use std::collections::{BTreeMap, HashMap};

use fnv::FnvBuildHasher;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::features::Input;

type Rows = HashMap<u32, Vec<f64>, FnvBuildHasher>;

/// `scores = W x + b`, with `W` stored as one row of per-output weights per
/// input feature. Absent rows are zero.
#[derive(Debug, Clone)]
pub struct Linear {
    pub n_out: usize,
    rows: Rows,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(n_out: usize) -> Self {
        Linear {
            n_out,
            rows: Rows::default(),
            bias: vec![0.0; n_out],
        }
    }

    pub fn scores(&self, x: &Input) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (k, v) in x {
            if let Some(row) = self.rows.get(k) {
                out.iter_mut().zip(row).for_each(|(o, w)| *o += w * v);
            }
        }
        out
    }

    pub fn row(&self, feature: u32) -> Option<&[f64]> {
        self.rows.get(&feature).map(Vec::as_slice)
    }

    /// Number of features with a stored row.
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_zero(&self) -> bool {
        self.bias.iter().all(|b| *b == 0.0) && self.rows.values().flatten().all(|w| *w == 0.0)
    }
}

// Absent and all-zero rows are the same weights.
impl PartialEq for Linear {
    fn eq(&self, other: &Self) -> bool {
        let covered = |a: &Self, b: &Self| {
            a.rows.iter().all(|(k, r)| match b.rows.get(k) {
                Some(o) => o == r,
                None => r.iter().all(|w| *w == 0.0),
            })
        };
        self.n_out == other.n_out
            && self.bias == other.bias
            && covered(self, other)
            && covered(other, self)
    }
}

/// Rows are `[feature, weights]` pairs in feature order. A list rather than
/// a map keeps integer keys intact inside `#[serde(flatten)]` containers.
#[derive(Serialize, Deserialize)]
struct LinearRepr {
    n_out: usize,
    bias: Vec<f64>,
    rows: Vec<(u32, Vec<f64>)>,
}

impl Serialize for Linear {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LinearRepr {
            n_out: self.n_out,
            bias: self.bias.clone(),
            rows: self
                .rows
                .iter()
                .filter(|(_, r)| r.iter().any(|w| *w != 0.0))
                .map(|(k, r)| (*k, r.clone()))
                .collect::<BTreeMap<_, _>>()
                .into_iter()
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Linear {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = LinearRepr::deserialize(d)?;
        if repr.bias.len() != repr.n_out || repr.rows.iter().any(|(_, r)| r.len() != repr.n_out) {
            return Err(serde::de::Error::custom(
                "weight row length differs from n_out",
            ));
        }
        Ok(Linear {
            n_out: repr.n_out,
            rows: repr.rows.into_iter().collect(),
            bias: repr.bias,
        })
    }
}

/// Accumulated d(loss)/d(weights).
#[derive(Debug, Clone)]
pub struct Gradient {
    n_out: usize,
    rows: Rows,
    bias: Vec<f64>,
}

impl Gradient {
    pub fn new(n_out: usize) -> Self {
        Gradient {
            n_out,
            rows: Rows::default(),
            bias: vec![0.0; n_out],
        }
    }

    /// Adds `dscores ⊗ x`, where `dscores` is d(loss)/d(scores).
    pub fn add(&mut self, x: &Input, dscores: &[f64]) {
        for (k, v) in x {
            let row = self.rows.entry(*k).or_insert_with(|| vec![0.0; self.n_out]);
            row.iter_mut().zip(dscores).for_each(|(g, d)| *g += d * v);
        }
        self.bias.iter_mut().zip(dscores).for_each(|(g, d)| *g += d);
    }

    pub fn scale(&mut self, factor: f64) {
        self.rows.values_mut().flatten().for_each(|g| *g *= factor);
        self.bias.iter_mut().for_each(|g| *g *= factor);
    }
}

pub trait Optimizer {
    fn step(&mut self, model: &mut Linear, grad: &Gradient);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut Linear, grad: &Gradient) {
        let lr = self.learning_rate;
        for (k, g) in &grad.rows {
            let row = model
                .rows
                .entry(*k)
                .or_insert_with(|| vec![0.0; model.n_out]);
            row.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
        }
        model
            .bias
            .iter_mut()
            .zip(&grad.bias)
            .for_each(|(b, g)| *b -= lr * g);
    }
}

/// Adam with moments kept only for rows that have received a gradient.
/// Each row's bias correction uses its own update count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: HashMap<u32, (u32, Vec<f64>, Vec<f64>), FnvBuildHasher>,
    bias_moments: (u32, Vec<f64>, Vec<f64>),
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: HashMap::default(),
            bias_moments: (0, Vec::new(), Vec::new()),
        }
    }

    fn update(
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        state: &mut (u32, Vec<f64>, Vec<f64>),
        w: &mut [f64],
        g: &[f64],
    ) {
        let (t, m, v) = state;
        if m.is_empty() {
            *m = vec![0.0; g.len()];
            *v = vec![0.0; g.len()];
        }
        *t += 1;
        let c1 = 1.0 - b1.powi(*t as i32);
        let c2 = 1.0 - b2.powi(*t as i32);
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, model: &mut Linear, grad: &Gradient) {
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        for (k, g) in &grad.rows {
            let row = model
                .rows
                .entry(*k)
                .or_insert_with(|| vec![0.0; model.n_out]);
            let state = self
                .moments
                .entry(*k)
                .or_insert_with(|| (0, Vec::new(), Vec::new()));
            Self::update(lr, b1, b2, eps, state, row, g);
        }
        Self::update(
            lr,
            b1,
            b2,
            eps,
            &mut self.bias_moments,
            &mut model.bias,
            &grad.bias,
        );
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Softmax restricted to `mask`; masked-out entries get probability 0.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, m)| if *m { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_scores_bias() {
        let m = Linear::zeros(3);
        assert_eq!(m.scores(&vec![(5, 1.0)]), vec![0.0; 3]);
        assert!(m.is_zero());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut m = Linear::zeros(2);
        let mut g = Gradient::new(2);
        g.add(&vec![(7, 2.0)], &[1.0, -0.5]);
        Sgd { learning_rate: 0.1 }.step(&mut m, &g);
        assert_eq!(m.row(7).unwrap(), &[-0.2, 0.1]);
        assert_eq!(m.bias, vec![-0.1, 0.05]);
        assert_eq!(
            m.scores(&vec![(7, 1.0)]),
            vec![-0.30000000000000004, 0.15000000000000002]
        );
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut m = Linear::zeros(1);
        let mut g = Gradient::new(1);
        g.add(&vec![(1, 1.0)], &[3.0]);
        Adam::new(0.01).step(&mut m, &g);
        assert!((m.row(1).unwrap()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn serialization_is_sorted_and_round_trips() {
        let mut m = Linear::zeros(1);
        let mut g = Gradient::new(1);
        g.add(&vec![(9, 1.0), (2, 1.0)], &[1.0]);
        Sgd { learning_rate: 1.0 }.step(&mut m, &g);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(
            json,
            r#"{"n_out":1,"bias":[-1.0],"rows":[[2,[-1.0]],[9,[-1.0]]]}"#
        );
        let back: Linear = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn softmax_respects_mask() {
        let p = masked_softmax(&[0.0, 100.0, 0.0], &[true, false, true]);
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }
}
