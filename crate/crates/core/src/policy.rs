//! Tabular softmax policies `π_θ(y|x)` and supervised warm-starting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decimal_vec, Provenance};
use crate::numeric::{log_softmax, softmax};
use crate::seed::LabRng;
use crate::world::{sample_categorical, CondTable, Dataset};

pub const POLICY_SCHEMA: &str = "dora-lab/policy/v1";

/// Dense `(query, response)` table of reals, used for logits and gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    rows: usize,
    cols: usize,
    #[serde(with = "decimal_vec")]
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Table {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Arity(format!(
                "table data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Table { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Table) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Table) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn dot(&self, other: &Table) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Conditional policy over a discrete world with one logit per `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    logits: Table,
    frozen: bool,
    #[serde(default)]
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    schema: String,
    frozen: bool,
    provenance: Option<Provenance>,
    logits: Table,
}

impl PolicyModel {
    pub fn uniform(queries: usize, responses: usize) -> Self {
        PolicyModel {
            logits: Table::zeros(queries, responses),
            frozen: false,
            provenance: None,
        }
    }

    pub fn from_logits(logits: Table) -> Self {
        PolicyModel {
            logits,
            frozen: false,
            provenance: None,
        }
    }

    /// Policy whose softmax reproduces `table`; zero entries get `ln floor`.
    pub fn from_probabilities(table: &CondTable, floor: f64) -> Self {
        let mut logits = Table::zeros(table.queries(), table.responses());
        for x in 0..table.queries() {
            for (l, p) in logits.row_mut(x).iter_mut().zip(table.row(x)) {
                *l = p.max(floor).ln();
            }
        }
        PolicyModel::from_logits(logits)
    }

    pub fn queries(&self) -> usize {
        self.logits.rows()
    }

    pub fn responses(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn frozen_copy(&self) -> Self {
        PolicyModel {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn unfrozen_copy(&self) -> Self {
        PolicyModel {
            frozen: false,
            ..self.clone()
        }
    }

    /// `log π(·|x)` for the whole row.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(self.logits.row(x))
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        softmax(self.logits.row(x))
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        if x >= self.queries() {
            return Err(Error::IndexOutOfRange {
                what: "query",
                index: x,
                size: self.queries(),
            });
        }
        if y >= self.responses() {
            return Err(Error::IndexOutOfRange {
                what: "response",
                index: y,
                size: self.responses(),
            });
        }
        Ok(self.log_probs(x)[y])
    }

    /// `θ ← θ − step · grad`. Rejected on frozen policies.
    pub fn apply_gradient(&mut self, grad: &Table, step: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenPolicy);
        }
        if !self.logits.same_shape(grad) {
            return Err(Error::Arity("gradient shape differs from logits".into()));
        }
        self.logits.add_scaled(-step, grad);
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let doc = PolicyDoc {
            schema: POLICY_SCHEMA.to_string(),
            frozen: self.frozen,
            provenance: self.provenance.clone(),
            logits: self.logits.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: PolicyDoc = serde_json::from_slice(bytes)?;
        if doc.schema != POLICY_SCHEMA {
            return Err(Error::config("schema", format!("unknown policy schema {}", doc.schema)));
        }
        Table::from_vec(doc.logits.rows, doc.logits.cols, doc.logits.data.clone())?;
        Ok(PolicyModel {
            logits: doc.logits,
            frozen: doc.frozen,
            provenance: doc.provenance,
        })
    }
}

/// Categorical draw from `π(·|x)`.
pub fn sample_response(policy: &PolicyModel, x: usize, rng: &mut LabRng) -> usize {
    sample_categorical(&policy.probs(x), rng)
}

/// Full-batch gradient descent on the mean negative log-likelihood of each
/// datum's top-ranked response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        // The mean NLL has Hessian norm at most 1/2, so a step of 2 keeps
        // every update a descent step.
        SftConfig {
            step_size: 2.0,
            epochs: 500,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("sft.step_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("sft.epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Supervised warm start. Returns the frozen reference policy and the mean
/// NLL recorded before each epoch's update plus the final value.
pub fn sft_train_with_history(
    dataset: &Dataset,
    queries: usize,
    responses: usize,
    config: &SftConfig,
) -> Result<(PolicyModel, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("SFT dataset"));
    }
    let n = dataset.len() as f64;
    let mut counts = Table::zeros(queries, responses);
    for d in &dataset.data {
        let y = d.preferred();
        if d.query >= queries || y >= responses {
            return Err(Error::IndexOutOfRange {
                what: "response",
                index: y,
                size: responses,
            });
        }
        counts.row_mut(d.query)[y] += 1.0;
    }
    let row_totals: Vec<f64> = (0..queries).map(|x| counts.row(x).iter().sum()).collect();

    let mean_nll = |logits: &Table| -> f64 {
        let mut total = 0.0;
        for x in 0..queries {
            if row_totals[x] == 0.0 {
                continue;
            }
            let lp = log_softmax(logits.row(x));
            total -= counts.row(x).iter().zip(&lp).map(|(c, l)| c * l).sum::<f64>();
        }
        total / n
    };

    let mut logits = Table::zeros(queries, responses);
    let mut history = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        history.push(mean_nll(&logits));
        let mut grad = Table::zeros(queries, responses);
        for x in 0..queries {
            if row_totals[x] == 0.0 {
                continue;
            }
            let p = softmax(logits.row(x));
            for ((g, pi), c) in grad.row_mut(x).iter_mut().zip(&p).zip(counts.row(x)) {
                *g = (row_totals[x] * pi - c) / n;
            }
        }
        logits.add_scaled(-config.step_size, &grad);
    }
    history.push(mean_nll(&logits));
    let policy = PolicyModel {
        logits,
        frozen: true,
        provenance: None,
    };
    Ok((policy, history))
}

pub fn sft_train(
    dataset: &Dataset,
    queries: usize,
    responses: usize,
    config: &SftConfig,
) -> Result<PolicyModel> {
    Ok(sft_train_with_history(dataset, queries, responses, config)?.0)
}
