//! Evaluation metrics and experiment sweeps: target alignment, head-to-head
//! win rates under the reward oracle, reward/confidence regression, λ
//! sweeps, log-probability scatters and the aggregator × loss grid.

pub mod svg;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{ClassifierConfig, ClassifierModel};
use crate::dro::AggregatorKind;
use crate::error::{Error, Result};
use crate::io::{canonical_hash, csv_records, Provenance};
use crate::losses::{LossKind, LossSpec, RewardOracle};
use crate::numeric::{kl_divergence, mean, ols};
use crate::policy::{sample_response, sft_train, PolicyModel, SftConfig};
use crate::seed::{derive, rng_from, stream_seed, Stream};
use crate::trainer::{
    apply_corruption, calibration_for, run_phase1, run_phase2_with, Phase2Hooks, TrainConfig,
    TrainingLog,
};
use crate::world::{build_world, generate_dataset, ComponentConfig, Dataset, MixtureSpec, World, WorldConfig};

/// Mean over queries of `KL(Q₀(·|x) ‖ π(·|x))`. Infinite when the policy
/// puts zero mass where the target does not.
pub fn policy_target_kl(policy: &PolicyModel, world: &World) -> Result<f64> {
    if policy.queries() != world.query_count() || policy.responses() != world.response_count() {
        return Err(Error::Arity(format!(
            "policy is {}x{}, world is {}x{}",
            policy.queries(),
            policy.responses(),
            world.query_count(),
            world.response_count()
        )));
    }
    let total: f64 = (0..world.query_count())
        .map(|x| kl_divergence(world.target().row(x), &policy.probs(x)))
        .sum();
    Ok(total / world.query_count() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
}

/// Head-to-head comparison judged by the reward oracle. Queries come from
/// one stream; both policies draw their responses from identically seeded
/// streams, so swapping the arguments swaps wins and losses exactly.
pub fn win_rate(
    a: &PolicyModel,
    b: &PolicyModel,
    world: &World,
    oracle: &RewardOracle,
    n_queries: usize,
    seed: u64,
) -> Result<WinRate> {
    if n_queries == 0 {
        return Err(Error::config("eval.win_queries", "must be positive"));
    }
    policy_target_kl(a, world)?;
    policy_target_kl(b, world)?;
    let mut queries = rng_from(derive(seed, 0));
    let mut draw_a = rng_from(derive(seed, 1));
    let mut draw_b = rng_from(derive(seed, 1));
    let (mut wins, mut losses, mut ties) = (0usize, 0usize, 0usize);
    for _ in 0..n_queries {
        let x = queries.random_range(0..world.query_count());
        let ra = oracle.reward(world, x, sample_response(a, x, &mut draw_a))?;
        let rb = oracle.reward(world, x, sample_response(b, x, &mut draw_b))?;
        if ra > rb {
            wins += 1;
        } else if ra < rb {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = n_queries as f64;
    Ok(WinRate {
        win: wins as f64 / n,
        lose: losses as f64 / n,
        tie: ties as f64 / n,
    })
}

/// OLS slope of `reward` on `confidence`.
pub fn regression_slope(confidence: &[f64], reward: &[f64]) -> Result<f64> {
    ols(confidence, reward)
        .map(|f| f.slope)
        .ok_or(Error::UndefinedSlope("classifier confidences have zero variance"))
}

/// Which classifier scores a generated response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slot", rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Mean confidence over all slot classifiers.
    #[default]
    Mean,
    Slot(usize),
}

/// Paired samples behind [`reward_confidence_slope`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSample {
    pub confidence: Vec<f64>,
    /// Min-max normalized over the sample.
    pub reward: Vec<f64>,
}

pub fn confidence_sample(
    policy: &PolicyModel,
    world: &World,
    oracle: &RewardOracle,
    classifiers: &[ClassifierModel],
    source: ConfidenceSource,
    n_samples: usize,
    seed: u64,
) -> Result<ConfidenceSample> {
    if n_samples < 2 {
        return Err(Error::config("eval.slope_samples", "need at least two samples"));
    }
    if classifiers.is_empty() {
        return Err(Error::Empty("classifier list"));
    }
    if let ConfidenceSource::Slot(j) = source {
        if j >= classifiers.len() {
            return Err(Error::IndexOutOfRange {
                what: "slot",
                index: j,
                size: classifiers.len(),
            });
        }
    }
    let mut rng = rng_from(seed);
    let mut confidence = Vec::with_capacity(n_samples);
    let mut raw = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = rng.random_range(0..world.query_count());
        let y = sample_response(policy, x, &mut rng);
        raw.push(oracle.reward(world, x, y)?);
        confidence.push(match source {
            ConfidenceSource::Mean => {
                let cs: Vec<f64> = classifiers
                    .iter()
                    .map(|m| m.predict_proba(x, y))
                    .collect::<Result<_>>()?;
                mean(&cs)
            }
            ConfidenceSource::Slot(j) => classifiers[j].predict_proba(x, y)?,
        });
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let reward = raw
        .iter()
        .map(|r| if hi > lo { (r - lo) / (hi - lo) } else { 0.0 })
        .collect();
    Ok(ConfidenceSample { confidence, reward })
}

/// Slope of normalized reward against classifier confidence for responses
/// sampled from `policy`.
pub fn reward_confidence_slope(
    policy: &PolicyModel,
    world: &World,
    oracle: &RewardOracle,
    classifiers: &[ClassifierModel],
    source: ConfidenceSource,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let s = confidence_sample(policy, world, oracle, classifiers, source, n_samples, seed)?;
    regression_slope(&s.confidence, &s.reward)
}

/// One datum's preferred response under the SFT and trained policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub index: usize,
    pub sft_logprob: f64,
    pub policy_logprob: f64,
}

pub fn logprob_scatter(policy: &PolicyModel, sft: &PolicyModel, dataset: &Dataset) -> Result<Vec<ScatterPoint>> {
    dataset
        .data
        .iter()
        .enumerate()
        .map(|(index, d)| {
            let y = d.preferred();
            Ok(ScatterPoint {
                index,
                sft_logprob: sft.log_prob(d.query, y)?,
                policy_logprob: policy.log_prob(d.query, y)?,
            })
        })
        .collect()
}

/// Mean vertical distance between two scatters over the same data.
pub fn scatter_gap(a: &[ScatterPoint], b: &[ScatterPoint]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Arity("scatters must be nonempty and equally long".into()));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p.policy_logprob - q.policy_logprob).abs())
        .sum();
    Ok(total / a.len() as f64)
}

/// Who a trained policy plays against in the win-rate evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opponent {
    /// Logits `ln Q₀`.
    #[default]
    Target,
    /// The SFT warm start.
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub win_queries: usize,
    pub slope_samples: usize,
    pub confidence: ConfidenceSource,
    pub opponent: Opponent,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            win_queries: 4000,
            slope_samples: 4000,
            confidence: ConfidenceSource::Mean,
            opponent: Opponent::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_kl: f64,
    pub win_rate: f64,
    pub lose_rate: f64,
    pub tie_rate: f64,
    /// `None` when the sampled confidences have no spread.
    pub reward_confidence_slope: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Everything a training run needs besides its train section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSetup {
    pub world: WorldConfig,
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub oracle: RewardOracle,
    pub dataset_size: usize,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub sft: SftConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentSetup {
    /// An 8×8 world with `α = 0.5` over four slots whose synthetic
    /// components are biased toward responses the target rates low.
    pub fn default_shift(loss: LossKind, aggregator: AggregatorKind) -> Self {
        let synthetic = ComponentConfig::Dirichlet {
            concentration: 0.5,
            bias: 0.6,
        };
        ExperimentSetup {
            world: WorldConfig {
                query_count: 8,
                response_count: 8,
                target: ComponentConfig::Dirichlet {
                    concentration: 1.0,
                    bias: 0.0,
                },
                synthetic: vec![synthetic; 3],
                golden: None,
                tv_floor: 0.05,
                seed: 2024,
            },
            mixture: MixtureSpec::even(0.5, 4).expect("valid mixture"),
            oracle: RewardOracle::default(),
            dataset_size: 2000,
            classifier: ClassifierConfig::default(),
            sft: SftConfig::default(),
            train: TrainConfig {
                loss: LossSpec::dialogue(loss),
                aggregator,
                lambda: 1.0,
                step_size: 0.5,
                epochs: 10,
                batch_size: 32,
                seed: 0,
                corruption_rate: 0.0,
                grad_norm_tol: None,
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if self.mixture.n_slots() != self.world.synthetic.len() + 1 {
            return Err(Error::config(
                "mixture.betas",
                format!(
                    "{} slots in the mixture but {} world components",
                    self.mixture.n_slots(),
                    self.world.synthetic.len() + 1
                ),
            ));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be positive"));
        }
        self.classifier.validate()?;
        self.sft.validate()?;
        self.train.validate()?;
        if self.train.batch_size > self.dataset_size {
            return Err(Error::config("train.batch_size", "exceeds dataset_size"));
        }
        if self.eval.win_queries == 0 {
            return Err(Error::config("eval.win_queries", "must be positive"));
        }
        Ok(())
    }

    pub fn with_train(&self, train: TrainConfig) -> Self {
        ExperimentSetup {
            train,
            ..self.clone()
        }
    }
}

/// Seed-dependent state shared by every run of one setup: the world, the
/// clean dataset, the SFT reference and the classifiers.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub world: World,
    pub dataset: Dataset,
    pub reference: PolicyModel,
    pub classifiers: Vec<ClassifierModel>,
}

impl Prepared {
    pub fn new(setup: &ExperimentSetup, seed: u64) -> Result<Self> {
        setup.validate()?;
        let world = build_world(&setup.world)?;
        let dataset = generate_dataset(
            &world,
            &setup.mixture,
            &setup.oracle,
            setup.dataset_size,
            stream_seed(seed, Stream::Data),
        )?;
        Self::from_parts(setup, seed, world, dataset)
    }

    pub fn from_parts(setup: &ExperimentSetup, seed: u64, world: World, dataset: Dataset) -> Result<Self> {
        let q = world.query_count();
        let k = world.response_count();
        let reference = sft_train(&dataset, q, k, &setup.sft)?;
        let classifiers = run_phase1(&dataset, q, k, &setup.classifier)?;
        Ok(Prepared {
            seed,
            world,
            dataset,
            reference,
            classifiers,
        })
    }

    pub fn target_policy(&self) -> PolicyModel {
        PolicyModel::from_probabilities(self.world.target(), 1e-300).frozen_copy()
    }
}

/// A trained policy with its log and evaluation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub policy: PolicyModel,
    pub log: TrainingLog,
    pub calibration: Vec<f64>,
    pub training_data: Dataset,
    pub report: EvalReport,
}

/// Corrupted training data, calibration factors, trained policy and log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub policy: PolicyModel,
    pub log: TrainingLog,
    pub calibration: Vec<f64>,
    pub training_data: Dataset,
}

/// Trains with `setup.train` on prepared state. The train seed is derived
/// from the global seed, and the train section's own `seed` is mixed in.
pub fn train_prepared(setup: &ExperimentSetup, prepared: &Prepared, hooks: Phase2Hooks<'_>) -> Result<Trained> {
    setup.validate()?;
    let seed = prepared.seed;
    let training_data = apply_corruption(
        &prepared.dataset,
        setup.train.corruption_rate,
        stream_seed(seed, Stream::Corruption),
    )?;
    let (_, calibration) = calibration_for(
        &training_data,
        &prepared.classifiers,
        &setup.mixture,
        setup.train.aggregator,
    )?;
    let mut train = setup.train.clone();
    train.seed = derive(stream_seed(seed, Stream::Train), setup.train.seed);
    let (policy, log) = run_phase2_with(&training_data, &calibration, &prepared.reference, &train, hooks)?;
    Ok(Trained {
        policy,
        log,
        calibration,
        training_data,
    })
}

/// [`train_prepared`] followed by [`evaluate_policy`].
pub fn run_experiment(setup: &ExperimentSetup, prepared: &Prepared) -> Result<RunResult> {
    let t = train_prepared(setup, prepared, Phase2Hooks::default())?;
    let report = evaluate_policy(setup, prepared, &t.policy)?;
    Ok(RunResult {
        policy: t.policy,
        log: t.log,
        calibration: t.calibration,
        training_data: t.training_data,
        report,
    })
}

pub fn evaluate_policy(setup: &ExperimentSetup, prepared: &Prepared, policy: &PolicyModel) -> Result<EvalReport> {
    let eval_seed = stream_seed(prepared.seed, Stream::Eval);
    let opponent = match setup.eval.opponent {
        Opponent::Target => prepared.target_policy(),
        Opponent::Sft => prepared.reference.clone(),
    };
    let wr = win_rate(
        policy,
        &opponent,
        &prepared.world,
        &setup.oracle,
        setup.eval.win_queries,
        derive(eval_seed, 0),
    )?;
    let slope = match reward_confidence_slope(
        policy,
        &prepared.world,
        &setup.oracle,
        &prepared.classifiers,
        setup.eval.confidence,
        setup.eval.slope_samples,
        derive(eval_seed, 1),
    ) {
        Ok(s) => Some(s),
        Err(Error::UndefinedSlope(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        target_kl: policy_target_kl(policy, &prepared.world)?,
        win_rate: wr.win,
        lose_rate: wr.lose,
        tie_rate: wr.tie,
        reward_confidence_slope: slope,
        config_hash: canonical_hash(setup)?,
        seed: prepared.seed,
    })
}

/// Builds [`Prepared`] once per seed, in parallel.
pub fn prepare_all(setup: &ExperimentSetup, seeds: &[u64]) -> Result<BTreeMap<u64, Arc<Prepared>>> {
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let prepared: Vec<(u64, Arc<Prepared>)> = unique
        .par_iter()
        .map(|&s| Ok((s, Arc::new(Prepared::new(setup, s)?))))
        .collect::<Result<_>>()?;
    Ok(prepared.into_iter().collect())
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub aggregator: AggregatorKind,
    pub loss: LossKind,
    pub lambda: f64,
    pub corruption_rate: f64,
    pub seed: u64,
}

impl SweepCell {
    pub fn key(&self) -> String {
        format!(
            "{}_{}_l{:?}_c{:?}_s{}",
            self.aggregator.name(),
            self.loss.name(),
            self.lambda,
            self.corruption_rate,
            self.seed
        )
    }

    pub fn apply(&self, base: &ExperimentSetup) -> ExperimentSetup {
        let mut train = base.train.clone();
        train.aggregator = self.aggregator;
        train.lambda = self.lambda;
        train.corruption_rate = self.corruption_rate;
        if train.loss.kind != self.loss {
            train.loss.kind = self.loss;
        }
        base.with_train(train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub report: EvalReport,
    /// Mean vertical gap to the ERM policy's log-prob scatter with the same
    /// loss, corruption and seed.
    pub erm_gap: Option<f64>,
}

/// Axes of a full-factorial sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub aggregators: Vec<AggregatorKind>,
    pub losses: Vec<LossKind>,
    pub lambdas: Vec<f64>,
    #[serde(default = "zero_rate")]
    pub corruption_rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn zero_rate() -> Vec<f64> {
    vec![0.0]
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("aggregators", self.aggregators.is_empty()),
            ("losses", self.losses.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
            ("corruption_rates", self.corruption_rates.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::config(format!("sweep.{name}"), "must be nonempty"));
            }
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::config("sweep.lambdas", "must be positive"));
        }
        Ok(())
    }

    /// Cells in row-major order: aggregator, loss, λ, corruption, seed.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &aggregator in &self.aggregators {
            for &loss in &self.losses {
                for &lambda in &self.lambdas {
                    for &corruption_rate in &self.corruption_rates {
                        for &seed in &self.seeds {
                            out.push(SweepCell {
                                aggregator,
                                loss,
                                lambda,
                                corruption_rate,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trained policy and report for one cell.
pub fn run_cell(base: &ExperimentSetup, prepared: &Prepared, cell: &SweepCell) -> Result<RunResult> {
    run_experiment(&cell.apply(base), prepared)
}

/// The ERM partner of `cell`: same loss, corruption and seed.
pub fn erm_partner(cell: &SweepCell) -> SweepCell {
    SweepCell {
        aggregator: AggregatorKind::Erm,
        lambda: 1.0,
        ..cell.clone()
    }
}

/// Runs every cell (in parallel) and returns rows in [`SweepAxes::cells`]
/// order. Each row carries its scatter gap to the matching ERM run.
pub fn run_sweep(base: &ExperimentSetup, axes: &SweepAxes) -> Result<Vec<SweepRow>> {
    axes.validate()?;
    let prepared = prepare_all(base, &axes.seeds)?;
    let cells = axes.cells();
    cells
        .par_iter()
        .map(|cell| sweep_row(base, &prepared[&cell.seed], cell))
        .collect()
}

/// Runs one cell and its ERM partner and assembles the row.
pub fn sweep_row(base: &ExperimentSetup, prepared: &Prepared, cell: &SweepCell) -> Result<SweepRow> {
    let run = run_cell(base, prepared, cell)?;
    let erm = if cell.aggregator == AggregatorKind::Erm {
        run.policy.clone()
    } else {
        run_cell(base, prepared, &erm_partner(cell))?.policy
    };
    let a = logprob_scatter(&run.policy, &prepared.reference, &prepared.dataset)?;
    let b = logprob_scatter(&erm, &prepared.reference, &prepared.dataset)?;
    Ok(SweepRow {
        cell: cell.clone(),
        report: run.report,
        erm_gap: Some(scatter_gap(&a, &b)?),
    })
}

/// `lambdas × seeds` runs of `base.train.aggregator`.
pub fn lambda_sweep(base: &ExperimentSetup, lambdas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    run_sweep(
        base,
        &SweepAxes {
            aggregators: vec![base.train.aggregator],
            losses: vec![base.train.loss.kind],
            lambdas: lambdas.to_vec(),
            corruption_rates: vec![base.train.corruption_rate],
            seeds: seeds.to_vec(),
        },
    )
}

/// `aggregators × losses × seeds` at the base λ.
pub fn strategy_grid(
    base: &ExperimentSetup,
    aggregators: &[AggregatorKind],
    losses: &[LossKind],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    run_sweep(
        base,
        &SweepAxes {
            aggregators: aggregators.to_vec(),
            losses: losses.to_vec(),
            lambdas: vec![base.train.lambda],
            corruption_rates: vec![base.train.corruption_rate],
            seeds: seeds.to_vec(),
        },
    )
}

pub const SWEEP_HEADER: [&str; 12] = [
    "aggregator",
    "loss",
    "lambda",
    "corruption_rate",
    "seed",
    "target_kl",
    "win_rate",
    "lose_rate",
    "tie_rate",
    "reward_confidence_slope",
    "erm_gap",
    "config_hash",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

pub fn sweep_record(row: &SweepRow) -> Vec<String> {
    let c = &row.cell;
    let r = &row.report;
    vec![
        c.aggregator.name().to_string(),
        c.loss.name().to_string(),
        format!("{:?}", c.lambda),
        format!("{:?}", c.corruption_rate),
        c.seed.to_string(),
        format!("{:?}", r.target_kl),
        format!("{:?}", r.win_rate),
        format!("{:?}", r.lose_rate),
        format!("{:?}", r.tie_rate),
        opt(r.reward_confidence_slope),
        opt(row.erm_gap),
        r.config_hash.clone(),
    ]
}

pub fn sweep_csv(rows: &[SweepRow], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let records: Vec<Vec<String>> = rows.iter().map(sweep_record).collect();
    csv_records(&SWEEP_HEADER, &records, provenance)
}

pub fn scatter_csv(points: &[ScatterPoint], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let records: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.index.to_string(),
                format!("{:?}", p.sft_logprob),
                format!("{:?}", p.policy_logprob),
            ]
        })
        .collect();
    csv_records(&["index", "sft_logprob", "policy_logprob"], &records, provenance)
}

/// Fraction of paired seeds on which `better(a, b)` holds, pairing rows of
/// `a_kind` and `b_kind` with equal loss, λ, corruption and seed.
pub fn paired_fraction<F>(rows: &[SweepRow], a_kind: AggregatorKind, b_kind: AggregatorKind, better: F) -> Vec<(LossKind, usize, usize)>
where
    F: Fn(&SweepRow, &SweepRow) -> bool,
{
    let mut by_loss: BTreeMap<&'static str, (LossKind, usize, usize)> = BTreeMap::new();
    for a in rows.iter().filter(|r| r.cell.aggregator == a_kind) {
        let partner = rows.iter().find(|b| {
            b.cell.aggregator == b_kind
                && b.cell.loss == a.cell.loss
                && b.cell.seed == a.cell.seed
                && b.cell.corruption_rate == a.cell.corruption_rate
                && (b.cell.lambda == a.cell.lambda || !b_kind.is_robust() || !a_kind.is_robust())
        });
        if let Some(b) = partner {
            let e = by_loss.entry(a.cell.loss.name()).or_insert((a.cell.loss, 0, 0));
            e.2 += 1;
            if better(a, b) {
                e.1 += 1;
            }
        }
    }
    by_loss.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::CondTable;

    fn world() -> World {
        World::from_tables(
            vec![
                CondTable::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]]).unwrap(),
                CondTable::uniform(2, 3),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn target_kl_zero_at_target() {
        let w = world();
        let p = PolicyModel::from_probabilities(w.target(), 1e-300);
        assert!(policy_target_kl(&p, &w).unwrap().abs() < 1e-12);
        let u = PolicyModel::uniform(2, 3);
        assert!(policy_target_kl(&u, &w).unwrap() > 0.0);
        assert!(policy_target_kl(&PolicyModel::uniform(3, 3), &w).is_err());
    }

    #[test]
    fn self_play_ties() {
        let w = world();
        let p = PolicyModel::uniform(2, 3);
        let r = win_rate(&p, &p, &w, &RewardOracle::default(), 500, 9).unwrap();
        assert_eq!(r.tie, 1.0);
    }

    #[test]
    fn exact_line_slope() {
        let c = [0.1, 0.2, 0.5, 0.9];
        let r: Vec<f64> = c.iter().map(|x| 2.0 * x).collect();
        assert!((regression_slope(&c, &r).unwrap() - 2.0).abs() < 1e-9);
        assert!(regression_slope(&[0.3; 4], &r).is_err());
    }

    #[test]
    fn sweep_axes_arity() {
        let axes = SweepAxes {
            aggregators: AggregatorKind::ALL.to_vec(),
            losses: vec![LossKind::Lire],
            lambdas: vec![0.5, 1.0, 2.0, 4.0],
            corruption_rates: vec![0.0],
            seeds: (0..10).collect(),
        };
        assert_eq!(axes.cells().len(), 160);
    }
}
