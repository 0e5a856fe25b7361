use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dora_core::calib::{calibration_csv, precompute_calibration, ClassifierModel};
use dora_core::checks::{cross_check_csv, gradient_csv, verify, Fault};
use dora_core::dro::AggregatorKind;
use dora_core::evalhub::svg::{bar_chart, line_chart, scatter_chart, Series};
use dora_core::evalhub::{
    erm_partner, evaluate_policy, logprob_scatter, prepare_all, run_cell, scatter_csv, sweep_csv, sweep_row,
    train_prepared, Prepared, SweepCell, SweepRow,
};
use dora_core::io::{read_json, write_json_atomic, Provenance};
use dora_core::policy::PolicyModel;
use dora_core::seed::{stream_seed, Stream};
use dora_core::trainer::Phase2Hooks;
use dora_core::world::{build_world, generate_dataset, Dataset, World};
use dora_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_input, read_manifest, stamp, unstamp, OutputDir};
use crate::config::{ExperimentConfig, SeedSource};

/// Verification failed; carries the failure lines.
#[derive(Debug)]
pub struct VerifyFailed(pub Vec<String>);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "verification failed ({} checks):", self.0.len())?;
        for line in &self.0 {
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for VerifyFailed {}

pub struct Context {
    pub config: ExperimentConfig,
    pub seed_source: SeedSource,
    pub out: PathBuf,
}

impl Context {
    fn provenance(&self) -> Result<Provenance, Error> {
        self.config.provenance()
    }

    fn output(&self, command: &str) -> Result<OutputDir, Error> {
        Ok(OutputDir::new(&self.out, command, &self.provenance()?, self.seed_source))
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierDoc {
    classifiers: Vec<ClassifierModel>,
}

fn load_world_and_data(ctx: &Context) -> anyhow::Result<(World, Dataset)> {
    let manifest = read_manifest(&ctx.out.join("generate_manifest.json"))
        .map_err(|e| anyhow::anyhow!("missing generate outputs in {}: {e}", ctx.out.display()))?;
    let expected = ctx.config.data_hash()?;
    let found = manifest.details.get("data_hash").and_then(|v| v.as_str()).unwrap_or("");
    if found != expected {
        return Err(Error::config(
            "world/mixture/dataset_size/seed",
            format!("dataset in {} was generated from a different configuration; rerun generate", ctx.out.display()),
        )
        .into());
    }
    let (world_bytes, _) = unstamp(&read_input(&ctx.out.join("world.json"))?)?;
    let (data_bytes, _) = unstamp(&read_input(&ctx.out.join("dataset.json"))?)?;
    Ok((World::from_json(&world_bytes)?, Dataset::from_json(&data_bytes)?))
}

pub fn generate(ctx: &Context) -> anyhow::Result<PathBuf> {
    let cfg = &ctx.config;
    let prov = ctx.provenance()?;
    let world = build_world(&cfg.world)?;
    let dataset = generate_dataset(
        &world,
        &cfg.mixture,
        &cfg.oracle,
        cfg.dataset_size,
        stream_seed(cfg.seed, Stream::Data),
    )?;
    let mut out = ctx.output("generate")?;
    out.write("world.json", &stamp(&world.to_json()?, &prov)?)?;
    out.write("dataset.json", &stamp(&dataset.to_json()?, &prov)?)?;
    out.detail("data_hash", &cfg.data_hash()?)?;
    Ok(out.finish()?)
}

pub fn train(ctx: &Context) -> anyhow::Result<PathBuf> {
    let cfg = &ctx.config;
    let prov = ctx.provenance()?;
    let setup = cfg.setup();
    let (world, dataset) = load_world_and_data(ctx)?;
    let prepared = Prepared::from_parts(&setup, cfg.seed, world, dataset)?;
    let hooks = Phase2Hooks {
        monitor: Some(&prepared.world),
        on_epoch: None,
    };
    let trained = train_prepared(&setup, &prepared, hooks)?;
    let records = precompute_calibration(&trained.training_data, &prepared.classifiers, &setup.mixture)?;

    let mut out = ctx.output("train")?;
    let classifiers = ClassifierDoc {
        classifiers: prepared.classifiers.clone(),
    };
    out.write("classifiers.json", &stamp(&serde_json::to_vec(&classifiers)?, &prov)?)?;
    out.write(
        "reference.json",
        &prepared.reference.clone().with_provenance(prov.clone()).to_json()?,
    )?;
    out.write("calibration.csv", &calibration_csv(&records, Some(&prov))?)?;
    out.write(
        "policy.json",
        &trained.policy.clone().with_provenance(prov.clone()).to_json()?,
    )?;
    out.write("train_steps.csv", &trained.log.steps_csv(Some(&prov))?)?;
    out.write("train_epochs.csv", &trained.log.epochs_csv(Some(&prov))?)?;
    out.detail("aggregator", &setup.train.aggregator)?;
    out.detail("loss", &setup.train.loss.kind)?;
    out.detail("lambda", &setup.train.lambda)?;
    out.detail("corruption_rate", &trained.training_data.corruption_rate)?;
    out.detail("corrupted_indices", &trained.training_data.corrupted)?;
    out.detail("steps", &trained.log.steps.len())?;
    out.detail("stopped_early", &trained.log.stopped_early)?;
    Ok(out.finish()?)
}

pub fn eval(ctx: &Context, policy_path: Option<&Path>) -> anyhow::Result<PathBuf> {
    let cfg = &ctx.config;
    let prov = ctx.provenance()?;
    let setup = cfg.setup();
    let (world, dataset) = load_world_and_data(ctx)?;
    let (cls_bytes, _) = unstamp(&read_input(&ctx.out.join("classifiers.json"))?)?;
    let classifiers: ClassifierDoc = serde_json::from_slice(&cls_bytes)?;
    let reference = PolicyModel::from_json(&read_input(&ctx.out.join("reference.json"))?)?;
    let policy_path = policy_path.map_or_else(|| ctx.out.join("policy.json"), Path::to_path_buf);
    let policy = PolicyModel::from_json(&read_input(&policy_path)?)?;
    let prepared = Prepared {
        seed: cfg.seed,
        world,
        dataset,
        reference,
        classifiers: classifiers.classifiers,
    };
    let report = evaluate_policy(&setup, &prepared, &policy)?;
    let scatter = logprob_scatter(&policy, &prepared.reference, &prepared.dataset)?;

    let mut out = ctx.output("eval")?;
    out.write("eval.json", &stamp(&serde_json::to_vec(&report)?, &prov)?)?;
    out.write("scatter.csv", &scatter_csv(&scatter, Some(&prov))?)?;
    let points: Vec<(f64, f64)> = scatter.iter().map(|p| (p.sft_logprob, p.policy_logprob)).collect();
    let svg = scatter_chart(
        &format!("Preferred-response log-probability ({})", provenance_label(&prov)),
        "SFT log-prob",
        "policy log-prob",
        &[Series {
            name: setup.train.aggregator.name().to_string(),
            points,
        }],
    );
    out.write("scatter.svg", svg.as_bytes())?;
    out.detail("policy", &policy_path.display().to_string())?;
    Ok(out.finish()?)
}

fn provenance_label(prov: &Provenance) -> String {
    format!("config {} seed {}", prov.config_hash, prov.seed)
}

pub fn verify_cmd(ctx: &Context, fault: Fault) -> anyhow::Result<PathBuf> {
    let cfg = &ctx.config;
    let prov = ctx.provenance()?;
    let report = verify(&cfg.verify, stream_seed(cfg.seed, Stream::Verify), fault)?;
    let failures = report.failures();
    let mut out = ctx.output("verify")?;
    out.write("verify_gaps.csv", &cross_check_csv(&report.cross_checks, Some(&prov))?)?;
    out.write("verify_gradients.csv", &gradient_csv(&report.gradients, Some(&prov))?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        instances: usize,
        max_gap: f64,
        gradient_checks: usize,
        max_gradient_error: f64,
        limits: &'a [dora_core::checks::LimitCheck],
        failures: &'a [String],
        fault: Fault,
    }
    let summary = Summary {
        instances: report.cross_checks.len(),
        max_gap: report.max_gap(),
        gradient_checks: report.gradients.len(),
        max_gradient_error: report.gradients.iter().fold(0.0, |m, g| m.max(g.relative_error)),
        limits: &report.limits,
        failures: &failures,
        fault,
    };
    out.write("verify_report.json", &stamp(&serde_json::to_vec(&summary)?, &prov)?)?;
    out.detail("passed", &failures.is_empty())?;
    let manifest = out.finish()?;
    if !failures.is_empty() {
        return Err(VerifyFailed(failures).into());
    }
    Ok(manifest)
}

const CELL_DIR: &str = "sweep_cells";
const RESUME_FILE: &str = "RESUME.json";

#[derive(Serialize, Deserialize)]
struct CellDoc {
    provenance: Provenance,
    row: SweepRow,
}

#[derive(Serialize, Deserialize)]
struct ResumeDoc {
    config_hash: String,
    seed: u64,
    completed: usize,
    remaining: Vec<String>,
}

/// Outcome of a (possibly partial) sweep.
pub enum SweepStatus {
    Complete(PathBuf),
    Partial { remaining: usize },
}

fn cell_path(out: &Path, cell: &SweepCell) -> PathBuf {
    out.join(CELL_DIR).join(format!("{}.json", cell.key()))
}

fn load_cell(path: &Path, prov: &Provenance) -> Option<SweepRow> {
    let doc: CellDoc = read_json(path).ok()?;
    (doc.provenance == *prov).then_some(doc.row)
}

pub fn sweep(ctx: &Context, max_cells: Option<usize>) -> anyhow::Result<SweepStatus> {
    let cfg = &ctx.config;
    let prov = ctx.provenance()?;
    let base = cfg.setup();
    let mut axes = cfg.sweep_axes();
    axes.validate()?;
    let replicates = axes.seeds.clone();
    axes.seeds = replicates.iter().map(|&r| cfg.replicate_seed(r)).collect();
    let cells = axes.cells();

    let missing: Vec<&SweepCell> = cells
        .iter()
        .filter(|c| load_cell(&cell_path(&ctx.out, c), &prov).is_none())
        .collect();
    let batch: Vec<&SweepCell> = missing.iter().copied().take(max_cells.unwrap_or(usize::MAX)).collect();
    let mut seeds: Vec<u64> = batch.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let prepared = prepare_all(&base, &seeds)?;
    let results: Vec<Result<(), Error>> = batch
        .par_iter()
        .map(|cell| {
            let row = sweep_row(&base, &prepared[&cell.seed], cell)?;
            write_json_atomic(
                &cell_path(&ctx.out, cell),
                &CellDoc {
                    provenance: prov.clone(),
                    row,
                },
            )
        })
        .collect();

    let remaining: Vec<String> = cells
        .iter()
        .filter(|c| load_cell(&cell_path(&ctx.out, c), &prov).is_none())
        .map(SweepCell::key)
        .collect();
    let resume_path = ctx.out.join(RESUME_FILE);
    if !remaining.is_empty() {
        write_json_atomic(
            &resume_path,
            &ResumeDoc {
                config_hash: prov.config_hash.clone(),
                seed: prov.seed,
                completed: cells.len() - remaining.len(),
                remaining: remaining.clone(),
            },
        )?;
        for r in results {
            r?;
        }
        return Ok(SweepStatus::Partial {
            remaining: remaining.len(),
        });
    }
    for r in results {
        r?;
    }
    if resume_path.exists() {
        std::fs::remove_file(&resume_path)?;
    }

    let rows: Vec<SweepRow> = cells
        .iter()
        .map(|c| load_cell(&cell_path(&ctx.out, c), &prov).expect("cell present"))
        .collect();
    let mut out = ctx.output("sweep")?;
    out.write("sweep.csv", &sweep_csv(&rows, Some(&prov))?)?;
    out.write("lambda_target_kl.svg", lambda_figure(&rows, &prov, |r| Some(r.report.target_kl), "target KL").as_bytes())?;
    out.write("lambda_erm_gap.svg", lambda_figure(&rows, &prov, |r| r.erm_gap, "mean |Δ log-prob| to ERM").as_bytes())?;
    out.write("strategy_win_rate.svg", strategy_figure(&rows, &prov).as_bytes())?;
    out.write("scatter.svg", scatter_figure(&base, &*prepared_for(&base, &cells, &prepared)?, &cells, &prov)?.as_bytes())?;
    out.detail("cells", &cells.len())?;
    out.detail("replicates", &replicates)?;
    out.detail(
        "replicate_seeds",
        &replicates
            .iter()
            .map(|&r| (r.to_string(), cfg.replicate_seed(r)))
            .collect::<BTreeMap<_, _>>(),
    )?;
    Ok(SweepStatus::Complete(out.finish()?))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn lambda_figure<F>(rows: &[SweepRow], prov: &Provenance, metric: F, y_label: &str) -> String
where
    F: Fn(&SweepRow) -> Option<f64>,
{
    let mut series = Vec::new();
    let mut keys: Vec<(AggregatorKind, &'static str)> = Vec::new();
    for r in rows {
        let k = (r.cell.aggregator, r.cell.loss.name());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (agg, loss) in keys {
        let mut by_lambda: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.cell.aggregator == agg && r.cell.loss.name() == loss) {
            if let Some(v) = metric(r) {
                by_lambda
                    .entry(r.cell.lambda.to_bits())
                    .or_insert((r.cell.lambda, Vec::new()))
                    .1
                    .push(v);
            }
        }
        let mut points: Vec<(f64, f64)> = by_lambda.into_values().map(|(l, v)| (l, mean(&v))).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series {
            name: format!("{} {}", agg.name(), loss),
            points,
        });
    }
    line_chart(&format!("{y_label} vs λ ({})", provenance_label(prov)), "λ", y_label, &series)
}

fn strategy_figure(rows: &[SweepRow], prov: &Provenance) -> String {
    let mut groups: Vec<&'static str> = Vec::new();
    let mut aggs: Vec<AggregatorKind> = Vec::new();
    for r in rows {
        if !groups.contains(&r.cell.loss.name()) {
            groups.push(r.cell.loss.name());
        }
        if !aggs.contains(&r.cell.aggregator) {
            aggs.push(r.cell.aggregator);
        }
    }
    let values: Vec<Vec<f64>> = aggs
        .iter()
        .map(|a| {
            groups
                .iter()
                .map(|g| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.cell.aggregator == *a && r.cell.loss.name() == *g)
                        .map(|r| r.report.win_rate)
                        .collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        mean(&v)
                    }
                })
                .collect()
        })
        .collect();
    bar_chart(
        &format!("Win rate by strategy ({})", provenance_label(prov)),
        "win rate",
        &groups.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
        &aggs.iter().map(|a| a.name().to_string()).collect::<Vec<_>>(),
        &values,
    )
}

fn prepared_for(
    base: &dora_core::evalhub::ExperimentSetup,
    cells: &[SweepCell],
    have: &BTreeMap<u64, Arc<Prepared>>,
) -> Result<Arc<Prepared>, Error> {
    let seed = cells[0].seed;
    match have.get(&seed) {
        Some(p) => Ok(p.clone()),
        None => Ok(Arc::new(Prepared::new(base, seed)?)),
    }
}

/// Preferred-response log-probs of the first cell's policy and of its ERM
/// partner against the SFT reference.
fn scatter_figure(
    base: &dora_core::evalhub::ExperimentSetup,
    prepared: &Prepared,
    cells: &[SweepCell],
    prov: &Provenance,
) -> Result<String, Error> {
    let cell = cells
        .iter()
        .find(|c| c.aggregator != AggregatorKind::Erm && c.seed == cells[0].seed)
        .unwrap_or(&cells[0]);
    let mut series = Vec::new();
    let mut pair = vec![cell.clone()];
    if cell.aggregator != AggregatorKind::Erm {
        pair.push(erm_partner(cell));
    }
    for c in &pair {
        let run = run_cell(base, prepared, c)?;
        let points = logprob_scatter(&run.policy, &prepared.reference, &prepared.dataset)?
            .iter()
            .map(|p| (p.sft_logprob, p.policy_logprob))
            .collect();
        series.push(Series {
            name: format!("{} λ={}", c.aggregator.name(), c.lambda),
            points,
        });
    }
    Ok(scatter_chart(
        &format!("{} log-prob vs SFT ({})", cell.loss.name(), provenance_label(prov)),
        "SFT log-prob",
        "policy log-prob",
        &series,
    ))
}
