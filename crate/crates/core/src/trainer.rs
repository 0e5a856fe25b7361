//! The two-phase training procedure: per-slot classifiers, a one-off
//! calibration pass, then minibatch gradient descent on the aggregated loss.
//! Also the self-training loop and the convergence-rate probe.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{precompute_calibration, train_classifier, CalibrationRecord, ClassifierConfig, ClassifierModel};
use crate::dro::{aggregate, aggregate_grad, AggregatorKind, Aggregation};
use crate::error::{Error, Result};
use crate::io::{csv_records, Provenance};
use crate::losses::{evaluate, sft_loss, LossKind, LossSpec, RewardOracle};
use crate::numeric::{kl_divergence, mean, ols};
use crate::policy::{sample_response, PolicyModel, Table};
use crate::seed::{derive, rng_from};
use crate::world::{corrupt_labels, generate_dataset_with, Dataset, MixtureSpec, PreferenceDatum, World};

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub aggregator: AggregatorKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corruption_rate: f64,
    /// Stop once a step's gradient norm falls below this value.
    #[serde(default)]
    pub grad_norm_tol: Option<f64>,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, aggregator: AggregatorKind) -> Self {
        TrainConfig {
            loss,
            aggregator,
            lambda: 1.0,
            step_size: 0.5,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            corruption_rate: 0.0,
            grad_norm_tol: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config("train.lambda", "must be positive"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("train.step_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.corruption_rate.is_finite() && (0.0..=1.0).contains(&self.corruption_rate)) {
            return Err(Error::config("train.corruption_rate", "must lie in [0, 1]"));
        }
        if let Some(tol) = self.grad_norm_tol {
            if !(tol.is_finite() && tol >= 0.0) {
                return Err(Error::config("train.grad_norm_tol", "must be nonnegative"));
            }
        }
        Ok(())
    }

    fn validate_for(&self, dataset_len: usize) -> Result<()> {
        self.validate()?;
        if dataset_len == 0 {
            return Err(Error::Empty("training dataset"));
        }
        if self.batch_size > dataset_len {
            return Err(Error::config(
                "train.batch_size",
                format!("{} exceeds the dataset size {dataset_len}", self.batch_size),
            ));
        }
        Ok(())
    }
}

/// One optimizer step. Wall time is informational and ignored by equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_seconds: f64,
}

impl PartialEq for StepRecord {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.loss.to_bits() == other.loss.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    /// Mean aggregated batch loss over the epoch.
    pub mean_loss: f64,
    /// Target KL after the epoch, when a world was supplied for monitoring.
    pub target_kl: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSnapshot>,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// Step CSV: `step, epoch, loss, grad_norm`. Wall time is left out so the
    /// file is reproducible.
    pub fn steps_csv(&self, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
        let header = ["step", "epoch", "loss", "grad_norm"];
        let rows: Vec<Vec<String>> = self
            .steps
            .iter()
            .map(|s| {
                vec![
                    s.step.to_string(),
                    s.epoch.to_string(),
                    format!("{:?}", s.loss),
                    format!("{:?}", s.grad_norm),
                ]
            })
            .collect();
        csv_records(&header, &rows, provenance)
    }

    pub fn epochs_csv(&self, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
        let header = ["epoch", "mean_loss", "target_kl"];
        let rows: Vec<Vec<String>> = self
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:?}", e.mean_loss),
                    e.target_kl.map_or(String::new(), |k| format!("{k:?}")),
                ]
            })
            .collect();
        csv_records(&header, &rows, provenance)
    }
}

/// Phase 1: one classifier per slot, trained in parallel and returned in
/// slot order.
pub fn run_phase1(
    dataset: &Dataset,
    queries: usize,
    responses: usize,
    config: &ClassifierConfig,
) -> Result<Vec<ClassifierModel>> {
    if dataset.is_empty() {
        return Err(Error::Empty("classifier dataset"));
    }
    (0..dataset.n_slots())
        .into_par_iter()
        .map(|slot| train_classifier(dataset, slot, queries, responses, config))
        .collect()
}

/// Result of a single step before the update is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: Vec<f64>,
    pub aggregation: Aggregation,
    pub gradient: Table,
}

/// Evaluates the batch and returns the gradient the optimizer applies.
pub fn train_step(
    policy: &PolicyModel,
    reference: &PolicyModel,
    batch: &[&PreferenceDatum],
    calibration: &[f64],
    config: &TrainConfig,
) -> Result<StepOutput> {
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for d in batch {
        let lv = evaluate(&config.loss, policy, Some(reference), d)?;
        losses.push(lv.value);
        grads.push(lv.gradient);
    }
    let agg = aggregate_grad(&losses, &grads, calibration, config.aggregator, config.lambda)?;
    Ok(StepOutput {
        losses,
        aggregation: agg.aggregation,
        gradient: agg.gradient,
    })
}

/// Observers for [`run_phase2_with`].
#[derive(Default)]
pub struct Phase2Hooks<'a> {
    /// World used to record the target KL after every epoch.
    pub monitor: Option<&'a World>,
    /// Called with `(epoch, policy)` after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &PolicyModel) -> Result<()>>,
}

/// Phase 2 with precomputed calibration factors, starting from an unfrozen
/// copy of `reference`.
pub fn run_phase2_with(
    dataset: &Dataset,
    calibration: &[f64],
    reference: &PolicyModel,
    config: &TrainConfig,
    mut hooks: Phase2Hooks<'_>,
) -> Result<(PolicyModel, TrainingLog)> {
    config.validate_for(dataset.len())?;
    if calibration.len() != dataset.len() {
        return Err(Error::Arity(format!(
            "{} calibration factors for {} data",
            calibration.len(),
            dataset.len()
        )));
    }
    if !reference.is_frozen() {
        return Err(Error::config("reference", "the reference policy must be frozen"));
    }
    let mut policy = reference.unfrozen_copy();
    let mut log = TrainingLog::default();
    let mut rng = rng_from(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let started = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&PreferenceDatum> = idx.iter().map(|&i| &dataset.data[i]).collect();
            let calib: Vec<f64> = idx.iter().map(|&i| calibration[i]).collect();
            let out = match train_step(&policy, reference, &batch, &calib, config) {
                Err(Error::NonFinite(_)) => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        indices: idx.to_vec(),
                    })
                }
                other => other?,
            };
            let bad: Vec<usize> = idx
                .iter()
                .zip(&out.losses)
                .filter(|(_, l)| !l.is_finite())
                .map(|(i, _)| *i)
                .collect();
            if !bad.is_empty() || !out.aggregation.value.is_finite() {
                return Err(Error::NonFiniteLoss { step, indices: bad });
            }
            let grad_norm = out.gradient.norm();
            policy.apply_gradient(&out.gradient, config.step_size)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: out.aggregation.value,
                grad_norm,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            epoch_losses.push(out.aggregation.value);
            step += 1;
            if config.grad_norm_tol.is_some_and(|tol| grad_norm < tol) {
                log.stopped_early = true;
                log.epochs.push(snapshot(epoch, &epoch_losses, &policy, hooks.monitor));
                if let Some(cb) = hooks.on_epoch.as_mut() {
                    cb(epoch, &policy)?;
                }
                break 'epochs;
            }
        }
        log.epochs.push(snapshot(epoch, &epoch_losses, &policy, hooks.monitor));
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(epoch, &policy)?;
        }
    }
    Ok((policy, log))
}

fn snapshot(epoch: usize, losses: &[f64], policy: &PolicyModel, monitor: Option<&World>) -> EpochSnapshot {
    EpochSnapshot {
        epoch,
        mean_loss: mean(losses),
        target_kl: monitor.map(|w| target_kl(policy, w)),
    }
}

/// Mean over queries of `KL(Q₀(·|x) ‖ π(·|x))`.
pub(crate) fn target_kl(policy: &PolicyModel, world: &World) -> f64 {
    let total: f64 = (0..world.query_count())
        .map(|x| kl_divergence(world.target().row(x), &policy.probs(x)))
        .sum();
    total / world.query_count() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Output {
    pub policy: PolicyModel,
    pub log: TrainingLog,
    /// Empty when the aggregator ignores calibration.
    pub calibration: Vec<CalibrationRecord>,
}

/// Phase 2: precomputes calibration once (for the calibrated aggregators)
/// and trains.
pub fn run_phase2(
    dataset: &Dataset,
    classifiers: &[ClassifierModel],
    spec: &MixtureSpec,
    reference: &PolicyModel,
    config: &TrainConfig,
) -> Result<Phase2Output> {
    let (records, h) = calibration_for(dataset, classifiers, spec, config.aggregator)?;
    let (policy, log) = run_phase2_with(dataset, &h, reference, config, Phase2Hooks::default())?;
    Ok(Phase2Output {
        policy,
        log,
        calibration: records,
    })
}

/// Calibration records and factors as used by `aggregator`; factors are all
/// one when it ignores calibration.
pub fn calibration_for(
    dataset: &Dataset,
    classifiers: &[ClassifierModel],
    spec: &MixtureSpec,
    aggregator: AggregatorKind,
) -> Result<(Vec<CalibrationRecord>, Vec<f64>)> {
    if aggregator.uses_calibration() {
        let records = precompute_calibration(dataset, classifiers, spec)?;
        let h = records.iter().map(|r| r.h_tilde).collect();
        Ok((records, h))
    } else {
        Ok((Vec::new(), vec![1.0; dataset.len()]))
    }
}

/// Ranking corruption applied before training, seeded independently of the
/// batch order.
pub fn apply_corruption(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if rate == 0.0 {
        return Ok(dataset.clone());
    }
    corrupt_labels(dataset, rate, &mut rng_from(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub dataset_size: usize,
    /// Keep the first iteration's classifiers instead of retraining.
    #[serde(default)]
    pub reuse_classifiers: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainMetrics {
    pub iteration: usize,
    pub target_kl: f64,
    pub mean_h_tilde: f64,
    pub final_loss: f64,
}

/// Iterated training on self-generated data: each iteration fills the
/// synthetic draws with samples from the current policy, rescores with the
/// oracle, reruns both phases, and continues from the result.
pub fn self_train(
    world: &World,
    spec: &MixtureSpec,
    oracle: &RewardOracle,
    policy: &PolicyModel,
    iterations: usize,
    config: &SelfTrainConfig,
) -> Result<Vec<(PolicyModel, SelfTrainMetrics)>> {
    if iterations == 0 {
        return Err(Error::config("iterations", "must be at least 1"));
    }
    let mut current = policy.frozen_copy();
    let mut classifiers: Option<Vec<ClassifierModel>> = None;
    let mut out = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let data_seed = derive(config.seed, it as u64);
        let generator = current.clone();
        let dataset = generate_dataset_with(world, spec, oracle, config.dataset_size, data_seed, |x, _, rng| {
            sample_response(&generator, x, rng)
        })?;
        if classifiers.is_none() || !config.reuse_classifiers {
            classifiers = Some(run_phase1(
                &dataset,
                world.query_count(),
                world.response_count(),
                &config.classifier,
            )?);
        }
        let models = classifiers.as_deref().expect("trained above");
        let mut train = config.train.clone();
        train.seed = derive(config.train.seed, it as u64);
        let (records, h) = calibration_for(&dataset, models, spec, train.aggregator)?;
        let (trained, log) = run_phase2_with(&dataset, &h, &current, &train, Phase2Hooks::default())?;
        let mean_h = if records.is_empty() { 1.0 } else { mean(&h) };
        let metrics = SelfTrainMetrics {
            iteration: it,
            target_kl: target_kl(&trained, world),
            mean_h_tilde: mean_h,
            final_loss: log.steps.last().map_or(f64::NAN, |s| s.loss),
        };
        current = trained.frozen_copy();
        out.push((trained, metrics));
    }
    Ok(out)
}

/// Objective for [`convergence_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeObjective {
    /// The calibrated robust aggregate of a loss over a synthetic dataset in
    /// which every query has a single preferred response. Only convex loss
    /// kinds are accepted.
    Robust {
        loss: LossKind,
        queries: usize,
        responses: usize,
        data_per_query: usize,
        lambda: f64,
        /// Calibration factors are drawn uniformly from this range.
        h_range: [f64; 2],
    },
    /// `½ Σ a_k θ_k²` with eigenvalues `a_k = L·(k/d)^power`.
    Quadratic { dim: usize, power: f64 },
    /// The robust objective started at its (numerical) minimizer.
    AtOptimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub objective: ProbeObjective,
    pub checkpoints: Vec<usize>,
    pub reference_steps: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            objective: ProbeObjective::Robust {
                loss: LossKind::Sft,
                queries: 4,
                responses: 4,
                data_per_query: 4,
                lambda: 1.0,
                h_range: [0.5, 1.5],
            },
            checkpoints: vec![100, 1_000, 10_000],
            reference_steps: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub checkpoints: Vec<usize>,
    pub gaps: Vec<f64>,
    pub f_star: f64,
    pub step_size: f64,
    /// Least-squares slope of `ln gap` against `ln T`.
    pub slope: Option<f64>,
    pub residual_rms: Option<f64>,
    pub converged_at_init: bool,
}

struct RobustProbe {
    data: Vec<PreferenceDatum>,
    h: Vec<f64>,
    lambda: f64,
    spec: LossSpec,
    queries: usize,
    responses: usize,
}

impl RobustProbe {
    fn value_and_grad(&self, logits: &Table) -> Result<(f64, Table)> {
        let policy = PolicyModel::from_logits(logits.clone());
        let mut losses = Vec::with_capacity(self.data.len());
        let mut grads = Vec::with_capacity(self.data.len());
        for d in &self.data {
            let lv = match self.spec.kind {
                LossKind::Sft => sft_loss(&policy, d)?,
                _ => evaluate(&self.spec, &policy, None, d)?,
            };
            losses.push(lv.value);
            grads.push(lv.gradient);
        }
        let agg = aggregate_grad(&losses, &grads, &self.h, AggregatorKind::Dora, self.lambda)?;
        Ok((agg.aggregation.value, agg.gradient))
    }

    fn value(&self, logits: &Table) -> Result<f64> {
        let policy = PolicyModel::from_logits(logits.clone());
        let losses: Vec<f64> = self
            .data
            .iter()
            .map(|d| Ok(sft_loss(&policy, d)?.value))
            .collect::<Result<_>>()?;
        aggregate(&losses, &self.h, AggregatorKind::Dora, self.lambda)
    }

    /// `h_max·(1/2 + 2·h_max/λ)` bounds the Hessian of the aggregate: each
    /// loss has Hessian norm at most 1/2 and gradient norm at most √2.
    fn smoothness(&self) -> f64 {
        let h_max = self.h.iter().fold(0.0f64, |m, h| m.max(*h));
        h_max * (0.5 + 2.0 * h_max / self.lambda)
    }
}

fn robust_probe(
    loss: LossKind,
    queries: usize,
    responses: usize,
    data_per_query: usize,
    lambda: f64,
    h_range: [f64; 2],
    seed: u64,
) -> Result<RobustProbe> {
    use rand::Rng;
    if !loss.is_convex() {
        return Err(Error::Unsupported(format!(
            "{} is not convex in the logits; the probe needs a convex loss",
            loss.name()
        )));
    }
    if queries == 0 || responses < 2 || data_per_query == 0 {
        return Err(Error::config("probe", "needs queries ≥ 1, responses ≥ 2, data ≥ 1"));
    }
    if !(h_range[0] > 0.0 && h_range[1] >= h_range[0]) || !(lambda > 0.0) {
        return Err(Error::config("probe", "h_range must be positive and ordered, lambda positive"));
    }
    let mut rng = rng_from(seed);
    let mut data = Vec::new();
    let mut h = Vec::new();
    for x in 0..queries {
        let preferred = rng.random_range(0..responses);
        for _ in 0..data_per_query {
            data.push(PreferenceDatum {
                query: x,
                responses: vec![preferred],
                source_labels: vec![1],
                rewards: vec![0.0],
                ranking: vec![0],
            });
            h.push(rng.random_range(h_range[0]..=h_range[1]));
        }
    }
    Ok(RobustProbe {
        data,
        h,
        lambda,
        spec: LossSpec::dialogue(loss),
        queries,
        responses,
    })
}

fn fit_gaps(checkpoints: &[usize], gaps: &[f64]) -> (Option<f64>, Option<f64>) {
    let pts: Vec<(f64, f64)> = checkpoints
        .iter()
        .zip(gaps)
        .filter(|(_, g)| **g > 0.0)
        .map(|(t, g)| ((*t as f64).ln(), g.ln()))
        .collect();
    if pts.len() < 2 {
        return (None, None);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    match ols(&x, &y) {
        Some(fit) => (Some(fit.slope), Some(fit.residual_rms)),
        None => (None, None),
    }
}

/// Runs gradient descent with the constant `1/L` step, records the
/// optimality gap at each checkpoint, and fits the log-log rate.
pub fn convergence_probe(config: &ProbeConfig) -> Result<ConvergenceReport> {
    let mut checkpoints = config.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.is_empty() || checkpoints[0] == 0 {
        return Err(Error::config("probe.checkpoints", "need at least one positive step count"));
    }
    let last = *checkpoints.last().expect("nonempty");
    match &config.objective {
        ProbeObjective::Quadratic { dim, power } => {
            if *dim == 0 || !(*power > 0.0) {
                return Err(Error::config("probe", "quadratic needs dim ≥ 1 and power > 0"));
            }
            let l = 1.0;
            let a: Vec<f64> = (1..=*dim).map(|k| l * (k as f64 / *dim as f64).powf(*power)).collect();
            let mut theta = vec![1.0; *dim];
            let f = |t: &[f64]| 0.5 * t.iter().zip(&a).map(|(x, ak)| ak * x * x).sum::<f64>();
            let step = 1.0 / l;
            let mut gaps = Vec::new();
            let mut next = 0;
            for t in 1..=last {
                for (x, ak) in theta.iter_mut().zip(&a) {
                    *x -= step * ak * *x;
                }
                if t == checkpoints[next] {
                    gaps.push(f(&theta));
                    next += 1;
                }
            }
            let (slope, residual_rms) = fit_gaps(&checkpoints, &gaps);
            Ok(ConvergenceReport {
                checkpoints,
                gaps,
                f_star: 0.0,
                step_size: step,
                slope,
                residual_rms,
                converged_at_init: false,
            })
        }
        ProbeObjective::Robust {
            loss,
            queries,
            responses,
            data_per_query,
            lambda,
            h_range,
        } => {
            let probe = robust_probe(*loss, *queries, *responses, *data_per_query, *lambda, *h_range, config.seed)?;
            let init = Table::zeros(probe.queries, probe.responses);
            run_robust_probe(&probe, init, &checkpoints, config.reference_steps.max(last))
        }
        ProbeObjective::AtOptimum => {
            // A two-response world whose preferred responses are split evenly
            // has its minimizer at uniform logits.
            let mut probe = robust_probe(LossKind::Sft, 1, 2, 2, 1.0, [1.0, 1.0], config.seed)?;
            probe.data[0].responses = vec![0];
            probe.data[1].responses = vec![1];
            let init = Table::zeros(1, 2);
            run_robust_probe(&probe, init, &checkpoints, config.reference_steps.max(last))
        }
    }
}

fn run_robust_probe(
    probe: &RobustProbe,
    init: Table,
    checkpoints: &[usize],
    reference_steps: usize,
) -> Result<ConvergenceReport> {
    let step = 1.0 / probe.smoothness();
    let descend = |steps: usize, record: &[usize]| -> Result<(Table, Vec<f64>)> {
        let mut theta = init.clone();
        let mut values = Vec::new();
        let mut next = 0;
        for t in 1..=steps {
            let (_, g) = probe.value_and_grad(&theta)?;
            theta.add_scaled(-step, &g);
            if next < record.len() && t == record[next] {
                values.push(probe.value(&theta)?);
                next += 1;
            }
        }
        Ok((theta, values))
    };
    let (reference, _) = descend(reference_steps, &[])?;
    let f_star = probe.value(&reference)?.min(probe.value(&init)?);
    let f0 = probe.value(&init)?;
    let tol = 1e-12 * f_star.abs().max(1.0);
    if f0 - f_star <= tol {
        return Ok(ConvergenceReport {
            checkpoints: checkpoints.to_vec(),
            gaps: vec![0.0; checkpoints.len()],
            f_star,
            step_size: step,
            slope: None,
            residual_rms: None,
            converged_at_init: true,
        });
    }
    let last = *checkpoints.last().expect("nonempty");
    let (_, values) = descend(last, checkpoints)?;
    let gaps: Vec<f64> = values.iter().map(|v| (v - f_star).max(0.0)).collect();
    let (slope, residual_rms) = fit_gaps(checkpoints, &gaps);
    Ok(ConvergenceReport {
        checkpoints: checkpoints.to_vec(),
        gaps,
        f_star,
        step_size: step,
        slope,
        residual_rms,
        converged_at_init: false,
    })
}
