//! Self-contained verification suite: primal/dual agreement of the robust
//! risk, the tilted-form identity, aggregation limits, and finite-difference
//! checks of every analytic gradient.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::dro::{aggregate, aggregate_grad, dual_risk, worst_case_oracle, AggregatorKind};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradient, relative_error, FD_STEP};
use crate::io::{csv_records, Provenance};
use crate::losses::{evaluate, LossKind, LossSpec};
use crate::numeric::{kl_divergence, mean};
use crate::policy::{PolicyModel, Table};
use crate::seed::{derive, rng_from, LabRng};
use crate::world::{rank_by_rewards, PreferenceDatum};

/// A KL-DRO problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DroInstance {
    pub losses: Vec<f64>,
    pub base: Vec<f64>,
    pub rho: f64,
}

/// `N ≤ max_n` losses in `[−max_abs, max_abs]`, random base weights (with
/// occasional zero entries and tied maxima) and `ρ ∈ [0, max_rho]`.
pub fn random_instance(rng: &mut LabRng, max_n: usize, max_abs: f64, max_rho: f64) -> DroInstance {
    let n = rng.random_range(1..=max_n);
    let mut losses: Vec<f64> = (0..n).map(|_| rng.random_range(-max_abs..=max_abs)).collect();
    if n > 1 && rng.random_bool(0.1) {
        let top = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k = rng.random_range(0..n);
        losses[k] = top;
    }
    let mut base: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            if n > 1 && rng.random_bool(0.05) {
                0.0
            } else {
                e
            }
        })
        .collect();
    if base.iter().all(|b| *b == 0.0) {
        base[0] = 1.0;
    }
    let total: f64 = base.iter().sum();
    base.iter_mut().for_each(|b| *b /= total);
    let rho = match rng.random_range(0..20) {
        0 => 0.0,
        _ => rng.random_range(0.0..=max_rho),
    };
    DroInstance { losses, base, rho }
}

/// `|a − b| / max(1, |a|)`.
pub fn duality_gap(primal: f64, dual: f64) -> f64 {
    (primal - dual).abs() / primal.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckRow {
    pub instance: usize,
    pub n: usize,
    pub rho: f64,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// Largest relative deviation of `q*` from `p·exp(η u)/Z`; zero at the
    /// max-support vertex.
    pub tilt_error: f64,
    /// `|KL(q*‖p) − ρ|` when the budget binds away from the vertex.
    pub kl_error: f64,
    pub boundary: bool,
}

pub const GAP_TOLERANCE: f64 = 1e-6;
pub const TILT_TOLERANCE: f64 = 1e-8;

/// Solves one instance along both routes.
pub fn cross_check(instance_id: usize, inst: &DroInstance) -> Result<CrossCheckRow> {
    let sol = worst_case_oracle(&inst.losses, &inst.base, inst.rho)?;
    let dual = dual_risk(&inst.losses, &inst.base, inst.rho)?;
    let mut tilt_error = 0.0f64;
    let mut kl_error = 0.0;
    if !sol.boundary {
        for ((q, p), u) in sol.weights.iter().zip(&inst.base).zip(&inst.losses) {
            if *p > 0.0 {
                let expected = p * (sol.tilt * u - sol.log_normalizer).exp();
                tilt_error = tilt_error.max((q - expected).abs() / expected);
            }
        }
        if sol.constraint_active {
            kl_error = (kl_divergence(&sol.weights, &inst.base) - inst.rho).abs();
        }
    }
    Ok(CrossCheckRow {
        instance: instance_id,
        n: inst.losses.len(),
        rho: inst.rho,
        primal: sol.value,
        dual,
        gap: duality_gap(sol.value, dual),
        tilt_error,
        kl_error,
        boundary: sol.boundary,
    })
}

impl CrossCheckRow {
    pub fn passed(&self) -> bool {
        self.gap <= GAP_TOLERANCE && self.tilt_error <= TILT_TOLERANCE && self.kl_error <= TILT_TOLERANCE
    }
}

pub fn cross_check_csv(rows: &[CrossCheckRow], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                format!("{:?}", r.primal),
                format!("{:?}", r.dual),
                format!("{:?}", r.gap),
                format!("{:?}", r.tilt_error),
                format!("{:?}", r.kl_error),
            ]
        })
        .collect();
    csv_records(
        &["instance", "primal", "dual", "gap", "tilt_error", "kl_error"],
        &records,
        provenance,
    )
}

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Drops the `− ln N` term from the robust aggregate.
    BrokenAggregator,
}

fn aggregate_under_test(fault: Fault, u: &[f64], h: &[f64], kind: AggregatorKind, lambda: f64) -> Result<f64> {
    let v = aggregate(u, h, kind, lambda)?;
    Ok(match fault {
        Fault::BrokenAggregator if kind.is_robust() => v + lambda * (u.len() as f64).ln(),
        _ => v,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Random batch `(u, h̃)` whose scores `h̃·u` are pairwise at least
/// `min_gap` apart.
pub fn separated_batch(rng: &mut LabRng, n: usize, min_gap: f64) -> (Vec<f64>, Vec<f64>) {
    loop {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.95)).collect();
        let mut s: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a * b).collect();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] >= min_gap) {
            return (u, h);
        }
    }
}

/// Log-spaced grid of `count` values in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Limit behaviour of the robust aggregate on `trials` random batches.
pub fn limit_checks(trials: usize, seed: u64, fault: Fault) -> Result<Vec<LimitCheck>> {
    let mut rng = rng_from(seed);
    let mut worst_large = 0.0f64;
    let mut worst_small = 0.0f64;
    let mut monotone_failures = 0;
    let mut worst_translation = 0.0f64;
    let mut jensen_failures = 0;
    let mut constant_worst = 0.0f64;
    let grid = log_grid(1e-3, 1e3, 20);
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let (u, h) = separated_batch(&mut rng, n, 0.1);
        let s: Vec<f64> = u.iter().zip(&h).map(|(a, b)| a * b).collect();
        let target_mean = mean(&s);
        let target_max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let large = aggregate_under_test(fault, &u, &h, AggregatorKind::Dora, 1e6)?;
        worst_large = worst_large.max((large - target_mean).abs());
        let small = aggregate_under_test(fault, &u, &h, AggregatorKind::Dora, 1e-4)?;
        worst_small = worst_small.max((small - target_max).abs());
        let values: Vec<f64> = grid
            .iter()
            .map(|&l| aggregate_under_test(fault, &u, &h, AggregatorKind::Dora, l))
            .collect::<Result<_>>()?;
        if values.windows(2).any(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0)) {
            monotone_failures += 1;
        }
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let ones = vec![1.0; n];
        let a = aggregate_under_test(fault, &shifted, &ones, AggregatorKind::Dora, 1.0)?;
        let b = aggregate_under_test(fault, &s, &ones, AggregatorKind::Dora, 1.0)?;
        worst_translation = worst_translation.max((a - (b + c)).abs());
        let dora = aggregate_under_test(fault, &u, &h, AggregatorKind::Dora, 1.0)?;
        let rew = aggregate_under_test(fault, &u, &h, AggregatorKind::Reweight, 1.0)?;
        if dora < rew {
            jensen_failures += 1;
        }
        let constant = vec![u[0]; n];
        for kind in AggregatorKind::ALL {
            let v = aggregate_under_test(fault, &constant, &ones, kind, 0.7)?;
            constant_worst = constant_worst.max((v - u[0]).abs());
        }
    }
    Ok(vec![
        LimitCheck {
            name: "large_lambda_mean".into(),
            passed: worst_large <= 1e-4,
            detail: format!("max |agg(λ=1e6) − mean(h̃u)| = {worst_large:e}"),
        },
        LimitCheck {
            name: "small_lambda_max".into(),
            passed: worst_small <= 1e-3,
            detail: format!("max |agg(λ=1e-4) − max(h̃u)| = {worst_small:e}"),
        },
        LimitCheck {
            name: "monotone_in_lambda".into(),
            passed: monotone_failures == 0,
            detail: format!("{monotone_failures} of {trials} batches increase somewhere on the grid"),
        },
        LimitCheck {
            name: "translation".into(),
            passed: worst_translation <= 1e-10,
            detail: format!("max deviation {worst_translation:e}"),
        },
        LimitCheck {
            name: "jensen".into(),
            passed: jensen_failures == 0,
            detail: format!("{jensen_failures} batches with DORA < REWEIGHT"),
        },
        LimitCheck {
            name: "constant_batch".into(),
            passed: constant_worst <= 1e-12,
            detail: format!("max deviation {constant_worst:e}"),
        },
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub target: String,
    pub draw: usize,
    pub relative_error: f64,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Random `(policy, reference, datum)` on a small world. Rewards are
/// random so rankings and hinges are generic.
pub fn random_loss_input(rng: &mut LabRng, queries: usize, responses: usize, slots: usize) -> (Table, PolicyModel, PreferenceDatum) {
    let logits = Table::from_vec(
        queries,
        responses,
        (0..queries * responses).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .expect("shape");
    let reference = PolicyModel::from_logits(
        Table::from_vec(
            queries,
            responses,
            (0..queries * responses).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .expect("shape"),
    )
    .frozen_copy();
    let x = rng.random_range(0..queries);
    let ys: Vec<usize> = (0..slots).map(|_| rng.random_range(0..responses)).collect();
    let rewards: Vec<f64> = (0..slots).map(|_| rng.random_range(-3.0..0.0)).collect();
    let ranking = rank_by_rewards(&rewards);
    let datum = PreferenceDatum {
        query: x,
        responses: ys,
        source_labels: vec![1; slots],
        rewards,
        ranking,
    };
    (logits, reference, datum)
}

fn spec_for(kind: LossKind) -> LossSpec {
    LossSpec {
        kind,
        beta: 0.7,
        alpha_sft: 0.6,
        temperature: 1.3,
    }
}

/// Finite-difference checks for every loss kind and every aggregator.
pub fn gradient_checks(draws: usize, seed: u64, fault: Fault) -> Result<Vec<GradientRow>> {
    let mut rows = Vec::new();
    for (k, kind) in LossKind::ALL.iter().enumerate() {
        let mut rng = rng_from(derive(seed, k as u64));
        let spec = spec_for(*kind);
        for draw in 0..draws {
            let (logits, reference, datum) = random_loss_input(&mut rng, 3, 5, 4);
            let policy = PolicyModel::from_logits(logits.clone());
            let analytic = evaluate(&spec, &policy, Some(&reference), &datum)?.gradient;
            let f = |t: &Table| {
                evaluate(&spec, &PolicyModel::from_logits(t.clone()), Some(&reference), &datum)
                    .map(|v| v.value)
                    .unwrap_or(f64::NAN)
            };
            let check = check_gradient(f, &logits, &analytic, FD_STEP);
            rows.push(GradientRow {
                target: kind.name().to_string(),
                draw,
                relative_error: check.relative_error,
            });
        }
    }
    for (a, agg) in AggregatorKind::ALL.iter().enumerate() {
        let mut rng = rng_from(derive(seed, 100 + a as u64));
        for draw in 0..draws {
            let kind = LossKind::ALL[draw % LossKind::ALL.len()];
            let spec = spec_for(kind);
            let batch = rng.random_range(2..=6);
            let (logits, reference, first) = random_loss_input(&mut rng, 3, 5, 4);
            let mut data = vec![first];
            for _ in 1..batch {
                data.push(random_loss_input(&mut rng, 3, 5, 4).2);
            }
            let h: Vec<f64> = (0..batch).map(|_| rng.random_range(0.1..3.9)).collect();
            let lambda = rng.random_range(0.3..3.0);
            let value_at = |t: &Table| -> Result<(Vec<f64>, Vec<Table>)> {
                let p = PolicyModel::from_logits(t.clone());
                let mut us = Vec::new();
                let mut gs = Vec::new();
                for d in &data {
                    let v = evaluate(&spec, &p, Some(&reference), d)?;
                    us.push(v.value);
                    gs.push(v.gradient);
                }
                Ok((us, gs))
            };
            let (us, gs) = value_at(&logits)?;
            let analytic = aggregate_grad(&us, &gs, &h, *agg, lambda)?.gradient;
            let f = |t: &Table| {
                value_at(t)
                    .and_then(|(us, _)| aggregate_under_test(fault, &us, &h, *agg, lambda))
                    .unwrap_or(f64::NAN)
            };
            let check = check_gradient(f, &logits, &analytic, FD_STEP);
            rows.push(GradientRow {
                target: agg.name().to_string(),
                draw,
                relative_error: check.relative_error,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub instances: usize,
    pub gradient_draws: usize,
    pub limit_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            instances: 1000,
            gradient_draws: 50,
            limit_trials: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub cross_checks: Vec<CrossCheckRow>,
    pub gradients: Vec<GradientRow>,
    pub limits: Vec<LimitCheck>,
}

impl VerifyReport {
    /// Human-readable descriptions of every failed check.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in self.cross_checks.iter().filter(|r| !r.passed()) {
            out.push(format!(
                "instance {}: primal {} dual {} gap {:e} tilt {:e} kl {:e}",
                r.instance, r.primal, r.dual, r.gap, r.tilt_error, r.kl_error
            ));
        }
        for g in self.gradients.iter().filter(|g| !(g.relative_error <= GRADIENT_TOLERANCE)) {
            out.push(format!(
                "gradient {} draw {}: relative error {:e}",
                g.target, g.draw, g.relative_error
            ));
        }
        for l in self.limits.iter().filter(|l| !l.passed) {
            out.push(format!("limit {}: {}", l.name, l.detail));
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_gap(&self) -> f64 {
        self.cross_checks.iter().fold(0.0, |m, r| m.max(r.gap))
    }
}

/// Runs the full suite.
pub fn verify(config: &VerifyConfig, seed: u64, fault: Fault) -> Result<VerifyReport> {
    if config.instances == 0 {
        return Err(Error::config("verify.instances", "must be positive"));
    }
    let mut rng = rng_from(derive(seed, 0));
    let cross_checks = (0..config.instances)
        .map(|i| {
            let inst = random_instance(&mut rng, 20, 20.0, 3.0);
            cross_check(i, &inst)
        })
        .collect::<Result<Vec<_>>>()?;
    let gradients = gradient_checks(config.gradient_draws, derive(seed, 1), fault)?;
    let limits = limit_checks(config.limit_trials, derive(seed, 2), fault)?;
    Ok(VerifyReport {
        cross_checks,
        gradients,
        limits,
    })
}

pub fn gradient_csv(rows: &[GradientRow], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.target.clone(), r.draw.to_string(), format!("{:?}", r.relative_error)])
        .collect();
    csv_records(&["target", "draw", "relative_error"], &records, provenance)
}

/// Relative error helper re-exported for callers comparing scalars.
pub fn scalar_relative_error(a: f64, b: f64) -> f64 {
    relative_error(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = verify(
            &VerifyConfig {
                instances: 200,
                gradient_draws: 5,
                limit_trials: 20,
            },
            3,
            Fault::None,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn broken_aggregator_is_caught() {
        let report = verify(
            &VerifyConfig {
                instances: 5,
                gradient_draws: 2,
                limit_trials: 5,
            },
            3,
            Fault::BrokenAggregator,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
