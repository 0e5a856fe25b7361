//! Per-slot probabilistic classifiers and the calibration factor built
//! from them.
//!
//! Slot `j`'s classifier `c_j(x, y)` estimates the probability that a
//! response seen in slot `j` is a target draw. With the label imbalance ratio
//! `γ_j = #label0 / #label1`, the odds `γ_j·c/(1−c)` estimate the density
//! ratio `P_golden(y|x) / Q_j(y|x)`. Per datum, the calibration factor
//! averages one stabilized term per slot:
//!
//! ```text
//! t_j = γ_j·c_j / (m_j·(1 − c_j) + 1/n),    h̃ = clamp((1/n)·Σ_j t_j, ε_h, n − ε_h)
//! ```
//!
//! where `c_j` is evaluated at `(x, y_j)` and `m_j` is the slot's mixture
//! weight (`α` for slot 0, `β_j` otherwise).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_records, decimal_vec, Provenance};
use crate::numeric::{sigmoid, softplus};
use crate::world::{Dataset, MixtureSpec, PreferenceDatum};

/// Clamp margin for `h̃` inside `(0, n)`.
pub const H_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureEncoding {
    /// `onehot(x) ⊕ onehot(y) ⊕ [1]`.
    OneHot,
    /// `onehot(x) ⊕ onehot(y) ⊕ onehot(x, y) ⊕ [1]`; can represent any
    /// posterior on a discrete world.
    OneHotInteractions,
}

/// Fixed-length encoding of `(x, y)` pairs for one world size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub queries: usize,
    pub responses: usize,
    pub encoding: FeatureEncoding,
}

impl FeatureMap {
    pub fn new(queries: usize, responses: usize, encoding: FeatureEncoding) -> Self {
        FeatureMap {
            queries,
            responses,
            encoding,
        }
    }

    pub fn dim(&self) -> usize {
        let base = self.queries + self.responses + 1;
        match self.encoding {
            FeatureEncoding::OneHot => base,
            FeatureEncoding::OneHotInteractions => base + self.queries * self.responses,
        }
    }

    /// Indices of the coordinates equal to one (all others are zero).
    pub fn active(&self, x: usize, y: usize) -> Result<Vec<usize>> {
        if x >= self.queries {
            return Err(Error::IndexOutOfRange {
                what: "query",
                index: x,
                size: self.queries,
            });
        }
        if y >= self.responses {
            return Err(Error::IndexOutOfRange {
                what: "response",
                index: y,
                size: self.responses,
            });
        }
        let mut idx = vec![x, self.queries + y];
        if self.encoding == FeatureEncoding::OneHotInteractions {
            idx.push(self.queries + self.responses + x * self.responses + y);
        }
        idx.push(self.dim() - 1);
        Ok(idx)
    }

    pub fn featurize(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        for i in self.active(x, y)? {
            v[i] = 1.0;
        }
        Ok(v)
    }

    fn max_sq_norm(&self) -> f64 {
        match self.encoding {
            FeatureEncoding::OneHot => 3.0,
            FeatureEncoding::OneHotInteractions => 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Gradient-descent step; `None` uses `1 / L` for the encoding's
    /// smoothness bound `L = max‖φ‖² / 4`.
    pub step_size: Option<f64>,
    pub epochs: usize,
    pub epsilon_clamp: f64,
    pub encoding: FeatureEncoding,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            step_size: None,
            epochs: 3000,
            epsilon_clamp: 1e-4,
            encoding: FeatureEncoding::OneHot,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step_size {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config("classifier.step_size", "must be positive"));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("classifier.epochs", "must be positive"));
        }
        if !(self.epsilon_clamp > 0.0 && self.epsilon_clamp < 0.5) {
            return Err(Error::config("classifier.epsilon_clamp", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Logistic classifier for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub slot: usize,
    pub features: FeatureMap,
    #[serde(with = "decimal_vec")]
    pub weights: Vec<f64>,
    #[serde(with = "crate::io::decimal")]
    pub imbalance_ratio: f64,
    #[serde(with = "crate::io::decimal")]
    pub epsilon_clamp: f64,
}

impl ClassifierModel {
    /// Linear score `w · φ(x, y)`.
    pub fn score(&self, x: usize, y: usize) -> Result<f64> {
        Ok(self
            .features
            .active(x, y)?
            .iter()
            .map(|&i| self.weights[i])
            .sum())
    }

    /// `σ(score)` clamped to `[ε, 1 − ε]`.
    pub fn predict_proba(&self, x: usize, y: usize) -> Result<f64> {
        let c = sigmoid(self.score(x, y)?);
        Ok(c.clamp(self.epsilon_clamp, 1.0 - self.epsilon_clamp))
    }

    /// `γ · c / (1 − c)`.
    pub fn importance_weight(&self, x: usize, y: usize) -> Result<f64> {
        let c = self.predict_proba(x, y)?;
        Ok(self.imbalance_ratio * c / (1.0 - c))
    }
}

/// Per-cell label counts for one slot: the sufficient statistics of the
/// logistic likelihood on one-hot features.
struct CellCounts {
    positives: Vec<f64>,
    totals: Vec<f64>,
    n: f64,
}

fn slot_counts(dataset: &Dataset, slot: usize, map: &FeatureMap) -> Result<CellCounts> {
    let cells = map.queries * map.responses;
    let mut positives = vec![0.0; cells];
    let mut totals = vec![0.0; cells];
    for d in &dataset.data {
        if slot >= d.n_slots() {
            return Err(Error::IndexOutOfRange {
                what: "slot",
                index: slot,
                size: d.n_slots(),
            });
        }
        let (x, y) = (d.query, d.responses[slot]);
        map.active(x, y)?;
        let cell = x * map.responses + y;
        totals[cell] += 1.0;
        positives[cell] += f64::from(d.source_labels[slot]);
    }
    Ok(CellCounts {
        positives,
        totals,
        n: dataset.len() as f64,
    })
}

/// Trains slot `slot`'s classifier by full-batch gradient descent on the
/// mean cross-entropy. Returns the model and the loss before each epoch plus
/// the final loss.
pub fn train_classifier_with_history(
    dataset: &Dataset,
    slot: usize,
    queries: usize,
    responses: usize,
    config: &ClassifierConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    config.validate()?;
    let map = FeatureMap::new(queries, responses, config.encoding);
    let counts = slot_counts(dataset, slot, &map)?;
    let ones: f64 = counts.positives.iter().sum();
    let zeros = counts.n - ones;
    if ones == 0.0 || zeros == 0.0 {
        return Err(Error::SingleClass {
            slot,
            label: u8::from(ones > 0.0),
            count: dataset.len(),
        });
    }
    let cell_features: Vec<Option<Vec<usize>>> = (0..queries * responses)
        .map(|cell| {
            (counts.totals[cell] > 0.0)
                .then(|| map.active(cell / responses, cell % responses).expect("in range"))
        })
        .collect();

    let step = config.step_size.unwrap_or(4.0 / map.max_sq_norm());
    let mut w = vec![0.0; map.dim()];
    let mut history = Vec::with_capacity(config.epochs + 1);
    let loss_and_grad = |w: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (cell, feats) in cell_features.iter().enumerate() {
            let Some(feats) = feats else { continue };
            let s: f64 = feats.iter().map(|&i| w[i]).sum();
            let pos = counts.positives[cell];
            let neg = counts.totals[cell] - pos;
            loss += pos * softplus(-s) + neg * softplus(s);
            let r = (counts.totals[cell] * sigmoid(s) - pos) / counts.n;
            for &i in feats {
                grad[i] += r;
            }
        }
        loss / counts.n
    };
    let mut grad = vec![0.0; map.dim()];
    for _ in 0..config.epochs {
        let loss = loss_and_grad(&w, &mut grad);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss for slot {slot}")));
        }
        history.push(loss);
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= step * gi;
        }
    }
    let final_loss = loss_and_grad(&w, &mut grad);
    if !final_loss.is_finite() {
        return Err(Error::NonFinite(format!("classifier loss for slot {slot}")));
    }
    history.push(final_loss);
    Ok((
        ClassifierModel {
            slot,
            features: map,
            weights: w,
            imbalance_ratio: zeros / ones,
            epsilon_clamp: config.epsilon_clamp,
        },
        history,
    ))
}

pub fn train_classifier(
    dataset: &Dataset,
    slot: usize,
    queries: usize,
    responses: usize,
    config: &ClassifierConfig,
) -> Result<ClassifierModel> {
    Ok(train_classifier_with_history(dataset, slot, queries, responses, config)?.0)
}

/// Calibration factor of one datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub datum_index: usize,
    pub h_tilde: f64,
    /// Stabilized per-slot terms before the final clamp.
    pub per_slot_terms: Vec<f64>,
}

/// Stabilized per-slot term `γ·c / (m·(1 − c) + 1/n)`.
pub fn stabilized_term(gamma: f64, confidence: f64, mixture_weight: f64, n_slots: usize) -> f64 {
    gamma * confidence / (mixture_weight * (1.0 - confidence) + 1.0 / n_slots as f64)
}

/// Mean of the terms clamped into `[ε_h, n − ε_h]`.
pub fn h_tilde_from_terms(terms: &[f64]) -> f64 {
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    mean.clamp(H_EPSILON, n - H_EPSILON)
}

pub fn calibration_factor(
    models: &[ClassifierModel],
    spec: &MixtureSpec,
    datum: &PreferenceDatum,
    datum_index: usize,
) -> Result<CalibrationRecord> {
    let n = models.len();
    if spec.n_slots() != n || datum.n_slots() != n {
        return Err(Error::Arity(format!(
            "{n} classifiers, {} mixture slots, {} datum slots",
            spec.n_slots(),
            datum.n_slots()
        )));
    }
    let mut terms = Vec::with_capacity(n);
    for (j, model) in models.iter().enumerate() {
        if model.slot != j {
            return Err(Error::Arity(format!("classifier {j} is for slot {}", model.slot)));
        }
        let m = spec.slot_weight(j);
        if !(m > 0.0) {
            return Err(Error::config(
                format!("mixture weight of slot {j}"),
                "must be positive to calibrate",
            ));
        }
        let c = model.predict_proba(datum.query, datum.responses[j])?;
        terms.push(stabilized_term(model.imbalance_ratio, c, m, n));
    }
    Ok(CalibrationRecord {
        datum_index,
        h_tilde: h_tilde_from_terms(&terms),
        per_slot_terms: terms,
    })
}

/// One record per datum, in dataset order.
pub fn precompute_calibration(
    dataset: &Dataset,
    models: &[ClassifierModel],
    spec: &MixtureSpec,
) -> Result<Vec<CalibrationRecord>> {
    dataset
        .data
        .par_iter()
        .enumerate()
        .map(|(i, d)| calibration_factor(models, spec, d, i))
        .collect()
}

/// CSV with columns `index, h_tilde, t_0 … t_{n−1}`.
pub fn calibration_csv(records: &[CalibrationRecord], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let n = records.first().map_or(0, |r| r.per_slot_terms.len());
    let mut header = vec!["index".to_string(), "h_tilde".to_string()];
    header.extend((0..n).map(|j| format!("t_{j}")));
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.datum_index.to_string(), format!("{:?}", r.h_tilde)];
            row.extend(r.per_slot_terms.iter().map(|t| format!("{t:?}")));
            row
        })
        .collect();
    csv_records(&header, &rows, provenance)
}
