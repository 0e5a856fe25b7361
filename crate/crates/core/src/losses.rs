//! Instance-level alignment losses `ℓ(θ, z)` with exact gradients, and the
//! synthetic reward oracle that scores responses.
//!
//! Every loss works on one datum, so only the datum's query row of the
//! gradient is nonzero. With `c_i = ∂ℓ/∂log π(y_i|x)`, the row gradient is
//! `Σ_i c_i·e_{y_i} − (Σ_i c_i)·π(·|x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, sigmoid, softmax, softplus};
use crate::policy::{PolicyModel, Table};
use crate::world::{PreferenceDatum, World};

/// Scores a response by the target log-density, `scale·max(ln Q₀(y|x), floor) + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardOracle {
    pub scale: f64,
    pub offset: f64,
    /// Log-density floor, used for zero-density responses.
    pub floor: f64,
}

impl Default for RewardOracle {
    fn default() -> Self {
        RewardOracle {
            scale: 1.0,
            offset: 0.0,
            floor: 1e-12f64.ln(),
        }
    }
}

impl RewardOracle {
    pub fn reward(&self, world: &World, x: usize, y: usize) -> Result<f64> {
        world.check_index(x, y)?;
        let q = world.target().get(x, y);
        let log_q = if q > 0.0 { q.ln().max(self.floor) } else { self.floor };
        Ok(self.scale * log_q + self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    DpoPair,
    DpoPl,
    Rrhf,
    Lire,
    Sft,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::DpoPair,
        LossKind::DpoPl,
        LossKind::Rrhf,
        LossKind::Lire,
        LossKind::Sft,
    ];
    pub const LISTWISE: [LossKind; 3] = [LossKind::DpoPl, LossKind::Rrhf, LossKind::Lire];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::DpoPair => "DPO_PAIR",
            LossKind::DpoPl => "DPO_PL",
            LossKind::Rrhf => "RRHF",
            LossKind::Lire => "LIRE",
            LossKind::Sft => "SFT",
        }
    }

    /// Whether the loss needs a reference policy.
    pub fn uses_reference(self) -> bool {
        matches!(self, LossKind::DpoPair | LossKind::DpoPl)
    }

    /// Whether the loss is convex in the logits.
    pub fn is_convex(self) -> bool {
        matches!(self, LossKind::Sft)
    }
}

/// A loss kind with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// DPO temperature.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// RRHF weight on the SFT term.
    #[serde(default = "default_alpha_sft")]
    pub alpha_sft: f64,
    /// LIRE softmax temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_beta() -> f64 {
    0.1
}
fn default_alpha_sft() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    2.0
}

impl LossSpec {
    /// Dialogue-task defaults: β = 0.1, α = 1.0, T = 2.0.
    pub fn dialogue(kind: LossKind) -> Self {
        LossSpec {
            kind,
            beta: 0.1,
            alpha_sft: 1.0,
            temperature: 2.0,
        }
    }

    /// Summarization-task defaults: β = 0.5, α = 0.5, T = 1.0.
    pub fn summarization(kind: LossKind) -> Self {
        LossSpec {
            kind,
            beta: 0.5,
            alpha_sft: 0.5,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("loss.beta", "must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        if !(self.alpha_sft.is_finite() && self.alpha_sft >= 0.0) {
            return Err(Error::config("loss.alpha_sft", "must be nonnegative"));
        }
        Ok(())
    }
}

/// A loss value with its gradient with respect to the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Table,
}

struct RowTerms {
    x: usize,
    log_probs: Vec<f64>,
}

impl RowTerms {
    fn new(policy: &PolicyModel, datum: &PreferenceDatum) -> Result<Self> {
        if datum.query >= policy.queries() {
            return Err(Error::IndexOutOfRange {
                what: "query",
                index: datum.query,
                size: policy.queries(),
            });
        }
        for &y in &datum.responses {
            if y >= policy.responses() {
                return Err(Error::IndexOutOfRange {
                    what: "response",
                    index: y,
                    size: policy.responses(),
                });
            }
        }
        Ok(RowTerms {
            x: datum.query,
            log_probs: policy.log_probs(datum.query),
        })
    }

    fn lp(&self, y: usize) -> f64 {
        self.log_probs[y]
    }

    /// Gradient table from per-slot coefficients `c_i = ∂ℓ/∂log π(y_i|x)`.
    fn gradient(&self, policy: &PolicyModel, responses: &[usize], coeffs: &[f64]) -> Table {
        let mut g = Table::zeros(policy.queries(), policy.responses());
        let total: f64 = coeffs.iter().sum();
        let row = g.row_mut(self.x);
        for (r, lp) in row.iter_mut().zip(&self.log_probs) {
            *r = -total * lp.exp();
        }
        for (&y, c) in responses.iter().zip(coeffs) {
            row[y] += c;
        }
        g
    }
}

fn check_trainable(policy: &PolicyModel) -> Result<()> {
    if policy.is_frozen() {
        return Err(Error::FrozenPolicy);
    }
    Ok(())
}

fn check_rewards(datum: &PreferenceDatum) -> Result<()> {
    if datum.rewards.len() != datum.responses.len() {
        return Err(Error::Arity("datum is missing rewards".into()));
    }
    if datum.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("datum rewards".into()));
    }
    Ok(())
}

fn check_ranking(datum: &PreferenceDatum) -> Result<()> {
    if datum.ranking.len() != datum.responses.len() || datum.ranking.is_empty() {
        return Err(Error::Arity("datum ranking does not cover its slots".into()));
    }
    Ok(())
}

fn implicit_rewards(
    terms: &RowTerms,
    reference: &PolicyModel,
    datum: &PreferenceDatum,
) -> Result<Vec<f64>> {
    if reference.queries() <= terms.x {
        return Err(Error::Arity("reference policy does not cover the datum".into()));
    }
    let ref_lp = reference.log_probs(terms.x);
    Ok(datum
        .responses
        .iter()
        .map(|&y| terms.lp(y) - ref_lp[y])
        .collect())
}

/// Pairwise DPO between the top-ranked and bottom-ranked slots:
/// `−log σ(β(s_w − s_l))` with `s = log π_θ − log π_ref`.
pub fn dpo_pair_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    datum: &PreferenceDatum,
    beta: f64,
) -> Result<LossValue> {
    check_trainable(policy)?;
    check_ranking(datum)?;
    if datum.ranking.len() < 2 {
        return Err(Error::Arity("pairwise DPO needs two ranked responses".into()));
    }
    let terms = RowTerms::new(policy, datum)?;
    let s = implicit_rewards(&terms, reference, datum)?;
    let w = datum.ranking[0];
    let l = *datum.ranking.last().expect("nonempty");
    let margin = beta * (s[w] - s[l]);
    let value = softplus(-margin);
    let d = beta * sigmoid(-margin);
    let mut coeffs = vec![0.0; datum.n_slots()];
    coeffs[w] -= d;
    coeffs[l] += d;
    Ok(LossValue {
        value,
        gradient: terms.gradient(policy, &datum.responses, &coeffs),
    })
}

/// Plackett–Luce DPO over the full ranking:
/// `Σ_k [log Σ_{j≥k} exp(β s_{τ(j)}) − β s_{τ(k)}]`.
pub fn dpo_pl_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    datum: &PreferenceDatum,
    beta: f64,
) -> Result<LossValue> {
    check_trainable(policy)?;
    check_ranking(datum)?;
    let terms = RowTerms::new(policy, datum)?;
    let s = implicit_rewards(&terms, reference, datum)?;
    let k = datum.ranking.len();
    let a: Vec<f64> = datum.ranking.iter().map(|&slot| beta * s[slot]).collect();
    let suffix_lse: Vec<f64> = (0..k).map(|i| log_sum_exp(&a[i..])).collect();
    let value: f64 = (0..k).map(|i| suffix_lse[i] - a[i]).sum();
    let mut coeffs = vec![0.0; datum.n_slots()];
    for m in 0..k {
        let mut d = -1.0;
        for lse in &suffix_lse[..=m] {
            d += (a[m] - lse).exp();
        }
        coeffs[datum.ranking[m]] = beta * d;
    }
    Ok(LossValue {
        value,
        gradient: terms.gradient(policy, &datum.responses, &coeffs),
    })
}

/// RRHF: hinge on every reward-ordered pair plus `alpha_sft` times the SFT
/// loss on the top-ranked response. Responses are atomic, so the
/// length-normalized score is `log π_θ(y|x) / 1`.
pub fn rrhf_loss(policy: &PolicyModel, datum: &PreferenceDatum, alpha_sft: f64) -> Result<LossValue> {
    check_rewards(datum)?;
    check_ranking(datum)?;
    let terms = RowTerms::new(policy, datum)?;
    let n = datum.n_slots();
    let length = 1.0;
    let p: Vec<f64> = datum.responses.iter().map(|&y| terms.lp(y) / length).collect();
    let mut coeffs = vec![0.0; n];
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if datum.rewards[i] < datum.rewards[j] && p[i] - p[j] > 0.0 {
                value += p[i] - p[j];
                coeffs[i] += 1.0 / length;
                coeffs[j] -= 1.0 / length;
            }
        }
    }
    let top = datum.ranking[0];
    value -= alpha_sft * terms.lp(datum.responses[top]);
    coeffs[top] -= alpha_sft;
    Ok(LossValue {
        value,
        gradient: terms.gradient(policy, &datum.responses, &coeffs),
    })
}

/// LIRE: `−Σ_j P_j R_j` with `P = softmax(log π_θ(y_j|x) / T)`.
pub fn lire_loss(policy: &PolicyModel, datum: &PreferenceDatum, temperature: f64) -> Result<LossValue> {
    check_rewards(datum)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::config("loss.temperature", "must be positive"));
    }
    let terms = RowTerms::new(policy, datum)?;
    let w: Vec<f64> = datum
        .responses
        .iter()
        .map(|&y| terms.lp(y) / temperature)
        .collect();
    let p = softmax(&w);
    let mean_reward: f64 = p.iter().zip(&datum.rewards).map(|(pi, r)| pi * r).sum();
    let coeffs: Vec<f64> = p
        .iter()
        .zip(&datum.rewards)
        .map(|(pi, r)| -pi * (r - mean_reward) / temperature)
        .collect();
    Ok(LossValue {
        value: -mean_reward,
        gradient: terms.gradient(policy, &datum.responses, &coeffs),
    })
}

/// `−log π_θ(y_{τ(0)}|x)`.
pub fn sft_loss(policy: &PolicyModel, datum: &PreferenceDatum) -> Result<LossValue> {
    check_ranking(datum)?;
    let terms = RowTerms::new(policy, datum)?;
    let top = datum.ranking[0];
    let mut coeffs = vec![0.0; datum.n_slots()];
    coeffs[top] = -1.0;
    Ok(LossValue {
        value: -terms.lp(datum.responses[top]),
        gradient: terms.gradient(policy, &datum.responses, &coeffs),
    })
}

/// Dispatches on `spec.kind`. `reference` is required for the DPO kinds.
pub fn evaluate(
    spec: &LossSpec,
    policy: &PolicyModel,
    reference: Option<&PolicyModel>,
    datum: &PreferenceDatum,
) -> Result<LossValue> {
    let need_ref = || {
        reference.ok_or_else(|| Error::config("reference", "DPO losses need a reference policy"))
    };
    match spec.kind {
        LossKind::DpoPair => dpo_pair_loss(policy, need_ref()?, datum, spec.beta),
        LossKind::DpoPl => dpo_pl_loss(policy, need_ref()?, datum, spec.beta),
        LossKind::Rrhf => rrhf_loss(policy, datum, spec.alpha_sft),
        LossKind::Lire => lire_loss(policy, datum, spec.temperature),
        LossKind::Sft => sft_loss(policy, datum),
    }
}

/// One row of the per-datum loss export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub index: usize,
    pub kind: LossKind,
    pub value: f64,
}

/// Per-datum loss values for debugging exports.
pub fn loss_records(
    spec: &LossSpec,
    policy: &PolicyModel,
    reference: Option<&PolicyModel>,
    data: &[PreferenceDatum],
) -> Result<Vec<LossRecord>> {
    data.iter()
        .enumerate()
        .map(|(index, d)| {
            Ok(LossRecord {
                index,
                kind: spec.kind,
                value: evaluate(spec, policy, reference, d)?.value,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{rank_by_rewards, CondTable};

    fn datum(responses: Vec<usize>, rewards: Vec<f64>) -> PreferenceDatum {
        let ranking = rank_by_rewards(&rewards);
        PreferenceDatum {
            query: 0,
            source_labels: vec![1; responses.len()],
            responses,
            rewards,
            ranking,
        }
    }

    fn policy_with_probs(probs: &[f64]) -> PolicyModel {
        let logits = probs.iter().map(|p| p.ln()).collect();
        PolicyModel::from_logits(Table::from_vec(1, probs.len(), logits).unwrap())
    }

    #[test]
    fn oracle_values() {
        let world = World::from_tables(
            vec![
                CondTable::from_rows(&[vec![0.8, 0.2, 0.0]]).unwrap(),
                CondTable::uniform(1, 3),
            ],
            None,
        )
        .unwrap();
        let o = RewardOracle::default();
        assert_eq!(o.reward(&world, 0, 0).unwrap(), 0.8f64.ln());
        assert_eq!(o.reward(&world, 0, 1).unwrap(), 0.2f64.ln());
        assert_eq!(o.reward(&world, 0, 2).unwrap(), 1e-12f64.ln());
        assert!(o.reward(&world, 0, 3).is_err());

        let uniform = World::from_tables(vec![CondTable::uniform(1, 4), CondTable::uniform(1, 4)], None).unwrap();
        assert_eq!(o.reward(&uniform, 0, 2).unwrap(), 0.25f64.ln());
        let point = World::from_tables(
            vec![CondTable::from_rows(&[vec![1.0, 0.0]]).unwrap(), CondTable::uniform(1, 2)],
            None,
        )
        .unwrap();
        assert_eq!(o.reward(&point, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn dpo_pair_hand_values() {
        let d = datum(vec![0, 1], vec![0.0, -1.0]);
        let reference = PolicyModel::uniform(1, 2).frozen_copy();
        let same = PolicyModel::uniform(1, 2);
        let v = dpo_pair_loss(&same, &reference, &d, 0.1).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-15);

        // s_w − s_l = ln 3 against a uniform reference.
        let p = policy_with_probs(&[0.75, 0.25]);
        let v = dpo_pair_loss(&p, &reference, &d, 1.0).unwrap();
        assert!((v.value - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((v.value - 0.2877).abs() < 1e-4);

        let sharp = PolicyModel::from_logits(Table::from_vec(1, 2, vec![100.0, -100.0]).unwrap());
        assert!(dpo_pair_loss(&sharp, &reference, &d, 1.0).unwrap().value < 1e-40);

        assert!(matches!(
            dpo_pair_loss(&reference, &reference, &d, 1.0),
            Err(Error::FrozenPolicy)
        ));
    }

    #[test]
    fn dpo_pl_hand_values() {
        let reference = PolicyModel::uniform(1, 4).frozen_copy();
        let same = PolicyModel::uniform(1, 4);
        let d = datum(vec![0, 1, 2, 3], vec![0.0, -1.0, -2.0, -3.0]);
        let v = dpo_pl_loss(&same, &reference, &d, 0.5).unwrap();
        assert!((v.value - 24f64.ln()).abs() < 1e-12);
        assert!((v.value - 3.1781).abs() < 1e-4);

        let single = datum(vec![2], vec![0.0]);
        assert_eq!(dpo_pl_loss(&same, &reference, &single, 0.5).unwrap().value, 0.0);
    }

    #[test]
    fn rrhf_hand_values() {
        // R₀ < R₁ with p₀ = −1, p₁ = −2.
        let mut d = datum(vec![0, 1], vec![-1.0, 0.0]);
        let logits = vec![-1.0, -2.0, 0.0];
        let p = PolicyModel::from_logits(Table::from_vec(1, 3, logits).unwrap());
        let lp = p.log_probs(0);
        assert!((lp[0] - lp[1] - 1.0).abs() < 1e-12);
        let v = rrhf_loss(&p, &d, 0.0).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);

        // Consistent ordering leaves only the SFT term.
        d.rewards = vec![0.0, -1.0];
        d.ranking = rank_by_rewards(&d.rewards);
        let v = rrhf_loss(&p, &d, 0.7).unwrap();
        assert!((v.value - 0.7 * -lp[0]).abs() < 1e-12);

        let flat = PolicyModel::uniform(1, 3);
        let d = datum(vec![0, 1, 2], vec![-2.0, 0.0, -1.0]);
        assert_eq!(rrhf_loss(&flat, &d, 0.0).unwrap().value, 0.0);

        let mut missing = d.clone();
        missing.rewards.pop();
        assert!(rrhf_loss(&flat, &missing, 0.0).is_err());
    }

    #[test]
    fn lire_hand_values() {
        let single = datum(vec![1], vec![-0.3]);
        let p = PolicyModel::uniform(1, 4);
        assert!((lire_loss(&p, &single, 2.0).unwrap().value - 0.3).abs() < 1e-15);

        let d = datum(vec![0, 1, 2, 3], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((lire_loss(&p, &d, 2.0).unwrap().value + 0.5).abs() < 1e-15);

        let p = policy_with_probs(&[0.75, 0.25]);
        let d = datum(vec![0, 1], vec![1.0, 0.0]);
        assert!((lire_loss(&p, &d, 1.0).unwrap().value + 0.75).abs() < 1e-12);

        let mut bad = d.clone();
        bad.rewards[0] = f64::NAN;
        assert!(lire_loss(&p, &bad, 1.0).is_err());
    }

    #[test]
    fn sft_hand_values() {
        let d = datum(vec![0, 1, 2, 3], vec![0.0, -1.0, -2.0, -3.0]);
        let uniform = PolicyModel::uniform(1, 4);
        assert!((sft_loss(&uniform, &d).unwrap().value - 4f64.ln()).abs() < 1e-15);
        let p = policy_with_probs(&[0.2, 0.3, 0.25, 0.25]);
        assert!((sft_loss(&p, &d).unwrap().value - 5f64.ln()).abs() < 1e-12);
        let mut logits = vec![-800.0; 4];
        logits[0] = 0.0;
        let point = PolicyModel::from_logits(Table::from_vec(1, 4, logits).unwrap());
        assert_eq!(sft_loss(&point, &d).unwrap().value, 0.0);
    }

    #[test]
    fn table7_presets() {
        let d = LossSpec::dialogue(LossKind::Lire);
        assert_eq!((d.beta, d.alpha_sft, d.temperature), (0.1, 1.0, 2.0));
        let s = LossSpec::summarization(LossKind::Lire);
        assert_eq!((s.beta, s.alpha_sft, s.temperature), (0.5, 0.5, 1.0));
        let mut bad = d.clone();
        bad.beta = 0.0;
        assert!(bad.validate().is_err());
    }
}
