//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the verdicts are printed on every run.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dora_core::calib::{h_tilde_from_terms, stabilized_term, ClassifierConfig};
use dora_core::checks::random_loss_input;
use dora_core::dro::{aggregate, aggregate_grad, dual_risk, worst_case_oracle, AggregatorKind};
use dora_core::evalhub::{logprob_scatter, prepare_all, run_experiment, scatter_gap, EvalReport, ExperimentSetup, Prepared};
use dora_core::losses::{evaluate, LossKind, LossSpec, RewardOracle};
use dora_core::policy::{PolicyModel, Table};
use dora_core::seed::{derive, rng_from, LabRng};
use dora_core::trainer::{convergence_probe, run_phase1, run_phase2_with, Phase2Hooks, ProbeConfig, TrainConfig};
use dora_core::world::{bayes_posterior, build_world, generate_dataset, ComponentConfig, MixtureSpec, WorldConfig};
use rand::Rng;
use rayon::prelude::*;

const LISTWISE: [LossKind; 3] = [LossKind::DpoPl, LossKind::Rrhf, LossKind::Lire];
const SEEDS: u64 = 10;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi / pi).ln())
        .sum()
}

fn random_problem(rng: &mut LabRng) -> (Vec<f64>, Vec<f64>, f64) {
    let n = rng.random_range(1..=20);
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..=20.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = w.iter().sum();
    let rho = rng.random_range(0.0..=3.0);
    (u, w.iter().map(|x| x / total).collect(), rho)
}

fn dual_primal() -> Verdict {
    let mut rng = rng_from(1);
    let started = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (u, p, rho) = random_problem(&mut rng);
        let primal = worst_case_oracle(&u, &p, rho).unwrap().value;
        let dual = dual_risk(&u, &p, rho).unwrap();
        worst = worst.max((primal - dual).abs() / primal.abs().max(1.0));
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("1000 instances, max relative gap {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn tilted_form() -> Verdict {
    let mut rng = rng_from(2);
    let mut worst_tilt = 0.0f64;
    let mut worst_kl = 0.0f64;
    let mut active = 0;
    for _ in 0..1000 {
        let (u, p, rho) = random_problem(&mut rng);
        let sol = worst_case_oracle(&u, &p, rho).unwrap();
        if sol.boundary {
            continue;
        }
        let a: Vec<f64> = u.iter().zip(&p).map(|(ui, pi)| pi.ln() + sol.tilt * ui).collect();
        let z = log_sum_exp(&a);
        for (q, ai) in sol.weights.iter().zip(&a) {
            let expected = (ai - z).exp();
            worst_tilt = worst_tilt.max((q - expected).abs() / expected);
        }
        if sol.constraint_active {
            active += 1;
            worst_kl = worst_kl.max((kl(&sol.weights, &p) - rho).abs());
        }
    }
    verdict(
        worst_tilt <= 1e-8 && worst_kl <= 1e-8 && active > 0,
        format!("max tilt error {worst_tilt:.2e}, max |KL − ρ| {worst_kl:.2e} over {active} active instances"),
    )
}

fn lse_limits() -> Verdict {
    let mut rng = rng_from(3);
    let grid: Vec<f64> = (0..20).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 19.0)).collect();
    let (mut worst_mean, mut worst_max, mut non_monotone) = (0.0f64, 0.0f64, 0);
    for _ in 0..500 {
        let n = rng.random_range(2..=8);
        let mut s: Vec<f64> = Vec::new();
        while s.len() < n {
            let v: f64 = rng.random_range(-5.0..5.0);
            if s.iter().all(|w| (w - v).abs() >= 0.1) {
                s.push(v);
            }
        }
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.8)).collect();
        let u: Vec<f64> = s.iter().zip(&h).map(|(a, b)| a / b).collect();
        let mean = s.iter().sum::<f64>() / n as f64;
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst_mean = worst_mean.max((aggregate(&u, &h, AggregatorKind::Dora, 1e6).unwrap() - mean).abs());
        worst_max = worst_max.max((aggregate(&u, &h, AggregatorKind::Dora, 1e-4).unwrap() - max).abs());
        let values: Vec<f64> = grid
            .iter()
            .map(|&l| aggregate(&u, &h, AggregatorKind::Dora, l).unwrap())
            .collect();
        if values.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
    }
    verdict(
        worst_mean <= 1e-4 && worst_max <= 1e-3 && non_monotone == 0,
        format!("|λ=1e6 − mean| {worst_mean:.2e}, |λ=1e-4 − max| {worst_max:.2e}, {non_monotone} non-monotone batches"),
    )
}

fn central_difference<F: Fn(&Table) -> f64>(f: F, at: &Table) -> Vec<f64> {
    let h = 1e-5;
    (0..at.as_slice().len())
        .map(|k| {
            let mut plus = at.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = at.clone();
            minus.as_mut_slice()[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn spec(kind: LossKind) -> LossSpec {
    LossSpec {
        kind,
        beta: 0.7,
        alpha_sft: 0.6,
        temperature: 1.3,
    }
}

fn gradients() -> Verdict {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut rng = rng_from(4);
    for kind in LossKind::ALL {
        let s = spec(kind);
        for _ in 0..50 {
            let (logits, reference, datum) = random_loss_input(&mut rng, 3, 5, 4);
            let analytic = evaluate(&s, &PolicyModel::from_logits(logits.clone()), Some(&reference), &datum)
                .unwrap()
                .gradient;
            let numeric = central_difference(
                |t| evaluate(&s, &PolicyModel::from_logits(t.clone()), Some(&reference), &datum).unwrap().value,
                &logits,
            );
            let e = worst.entry(kind.name()).or_default();
            *e = e.max(relative(analytic.as_slice(), &numeric));
        }
    }
    for agg in AggregatorKind::ALL {
        for draw in 0..50 {
            let s = spec(LossKind::ALL[draw % LossKind::ALL.len()]);
            let (logits, reference, first) = random_loss_input(&mut rng, 3, 5, 4);
            let mut data = vec![first];
            for _ in 1..rng.random_range(2..=6) {
                data.push(random_loss_input(&mut rng, 3, 5, 4).2);
            }
            let h: Vec<f64> = data.iter().map(|_| rng.random_range(0.1..3.9)).collect();
            let lambda = rng.random_range(0.3..3.0);
            let eval = |t: &Table| {
                let p = PolicyModel::from_logits(t.clone());
                data.iter()
                    .map(|d| evaluate(&s, &p, Some(&reference), d).unwrap())
                    .map(|v| (v.value, v.gradient))
                    .unzip::<f64, Table, Vec<f64>, Vec<Table>>()
            };
            let (us, gs) = eval(&logits);
            let analytic = aggregate_grad(&us, &gs, &h, agg, lambda).unwrap().gradient;
            let numeric = central_difference(|t| aggregate(&eval(t).0, &h, agg, lambda).unwrap(), &logits);
            let e = worst.entry(agg.name()).or_default();
            *e = e.max(relative(analytic.as_slice(), &numeric));
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(max <= 1e-5, format!("50 draws each; worst {}", summary.join(", ")))
}

fn classifier_recovery() -> Verdict {
    let config = WorldConfig {
        query_count: 8,
        response_count: 8,
        target: ComponentConfig::Dirichlet {
            concentration: 2.0,
            bias: 0.0,
        },
        synthetic: vec![
            ComponentConfig::Tilted { strength: 0.8 },
            ComponentConfig::Tilted { strength: 1.2 },
            ComponentConfig::Tilted { strength: 0.5 },
        ],
        golden: None,
        tv_floor: 0.05,
        seed: 11,
    };
    let world = build_world(&config).unwrap();
    let mixture = MixtureSpec::even(0.5, 4).unwrap();
    let data = generate_dataset(&world, &mixture, &RewardOracle::default(), 50_000, 5).unwrap();
    let models = run_phase1(&data, 8, 8, &ClassifierConfig::default()).unwrap();
    let (mut worst_posterior, mut worst_ratio) = (0.0f64, 0.0f64);
    for (slot, model) in models.iter().enumerate().skip(1) {
        for x in 0..8 {
            for y in 0..8 {
                let golden = world.golden().get(x, y);
                let synthetic = world.component(slot).get(x, y);
                if golden + synthetic == 0.0 {
                    continue;
                }
                let exact = bayes_posterior(&world, &mixture, slot, x, y).unwrap();
                worst_posterior = worst_posterior.max((exact - model.predict_proba(x, y).unwrap()).abs());
                if golden > 1e-3 && synthetic > 1e-3 {
                    let ratio = golden / synthetic;
                    worst_ratio = worst_ratio.max((model.importance_weight(x, y).unwrap() - ratio).abs() / ratio);
                }
            }
        }
    }
    verdict(
        worst_posterior <= 0.02 && worst_ratio <= 0.05,
        format!("max posterior deviation {worst_posterior:.4}, max density-ratio error {worst_ratio:.4}"),
    )
}

fn calibration_bound() -> Verdict {
    let mut rng = rng_from(6);
    let mut out_of_range = 0;
    for _ in 0..1_000_000 {
        let n = rng.random_range(1..=8);
        let gamma = 10f64.powf(rng.random_range(-3.0..3.0));
        let terms: Vec<f64> = (0..n)
            .map(|_| stabilized_term(gamma, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), n))
            .collect();
        let h = h_tilde_from_terms(&terms);
        if !(h > 0.0 && h < n as f64) {
            out_of_range += 1;
        }
    }
    let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    let mut non_strict = 0;
    for n in [2usize, 4, 8] {
        for gamma in [0.25, 0.5, 1.0] {
            for m in [0.0, 0.1, 0.5] {
                for slot in 0..n {
                    let h: Vec<f64> = grid
                        .iter()
                        .map(|&c| {
                            let terms: Vec<f64> = (0..n)
                                .map(|j| stabilized_term(gamma, if j == slot { c } else { 0.5 }, m, n))
                                .collect();
                            h_tilde_from_terms(&terms)
                        })
                        .collect();
                    non_strict += h.windows(2).filter(|w| w[1] <= w[0]).count();
                }
            }
        }
    }
    verdict(
        out_of_range == 0 && non_strict == 0,
        format!("{out_of_range} of 1e6 outside (0, n); {non_strict} non-increasing grid steps"),
    )
}

fn reduction_identity() -> Verdict {
    let mut setup = ExperimentSetup::default_shift(LossKind::DpoPl, AggregatorKind::Dora);
    setup.dataset_size = 600;
    let mut mismatches = Vec::new();
    for seed in 0..3 {
        let prepared = Prepared::new(&setup, seed).unwrap();
        let ones = vec![1.0; prepared.dataset.len()];
        for loss in LossKind::ALL {
            let run = |agg| {
                let mut config = TrainConfig::new(LossSpec::dialogue(loss), agg);
                config.epochs = 3;
                config.seed = derive(seed, 7);
                run_phase2_with(&prepared.dataset, &ones, &prepared.reference, &config, Phase2Hooks::default()).unwrap()
            };
            let bits = |p: &PolicyModel| p.logits().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            for (a, b) in [(AggregatorKind::Dora, AggregatorKind::Dro), (AggregatorKind::Reweight, AggregatorKind::Erm)] {
                let (pa, la) = run(a);
                let (pb, lb) = run(b);
                if bits(&pa) != bits(&pb) || la != lb {
                    mismatches.push(format!("{}/{}/{} seed {seed}", loss.name(), a.name(), b.name()));
                }
            }
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "3 seeds × every loss, bit-identical policies and logs".to_string()
        } else {
            format!("mismatched: {}", mismatches.join(", "))
        },
    )
}

struct Runner {
    base: ExperimentSetup,
    prepared: BTreeMap<u64, Arc<Prepared>>,
}

struct Run {
    report: EvalReport,
    policy: PolicyModel,
    seconds: f64,
}

impl Runner {
    fn new() -> Self {
        let base = ExperimentSetup::default_shift(LossKind::DpoPl, AggregatorKind::Dora);
        let seeds: Vec<u64> = (0..SEEDS).map(|r| derive(0, r)).collect();
        let prepared = prepare_all(&base, &seeds).unwrap();
        Runner { base, prepared }
    }

    fn seeds(&self) -> Vec<u64> {
        (0..SEEDS).map(|r| derive(0, r)).collect()
    }

    fn run(&self, loss: LossKind, agg: AggregatorKind, lambda: f64, corruption: f64, seed: u64) -> Run {
        let mut train = self.base.train.clone();
        train.loss = LossSpec::dialogue(loss);
        train.aggregator = agg;
        train.lambda = lambda;
        train.corruption_rate = corruption;
        let setup = self.base.with_train(train);
        let started = Instant::now();
        let r = run_experiment(&setup, &self.prepared[&seed]).unwrap();
        Run {
            report: r.report,
            policy: r.policy,
            seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn grid(&self, cells: Vec<(LossKind, AggregatorKind, f64, f64, u64)>) -> BTreeMap<String, Run> {
        cells
            .par_iter()
            .map(|&(l, a, lam, c, s)| (key(l, a, lam, c, s), self.run(l, a, lam, c, s)))
            .collect()
    }
}

fn key(loss: LossKind, agg: AggregatorKind, lambda: f64, corruption: f64, seed: u64) -> String {
    format!("{}/{}/{lambda}/{corruption}/{seed}", loss.name(), agg.name())
}

fn mixture_shift(runner: &Runner) -> Verdict {
    let mut cells = Vec::new();
    for loss in LISTWISE {
        for agg in [AggregatorKind::Dora, AggregatorKind::Erm] {
            for seed in runner.seeds() {
                cells.push((loss, agg, 1.0, 0.0, seed));
            }
        }
    }
    let runs = runner.grid(cells);
    let slowest = runs.values().map(|r| r.seconds).fold(0.0, f64::max);
    let mut passed = slowest < 60.0;
    let mut parts = Vec::new();
    for loss in LISTWISE {
        let wins = runner
            .seeds()
            .into_iter()
            .filter(|&s| {
                runs[&key(loss, AggregatorKind::Dora, 1.0, 0.0, s)].report.target_kl
                    < runs[&key(loss, AggregatorKind::Erm, 1.0, 0.0, s)].report.target_kl
            })
            .count();
        passed &= wins >= 8;
        parts.push(format!("{} {wins}/10", loss.name()));
    }
    verdict(
        passed,
        format!("DoRA target-KL below ERM: {}; slowest run {slowest:.2}s", parts.join(", ")),
    )
}

fn corruption(runner: &Runner) -> Verdict {
    let rates = [0.2, 0.4, 0.6];
    let mut cells = Vec::new();
    for loss in LISTWISE {
        for agg in [AggregatorKind::Dora, AggregatorKind::Erm] {
            for rate in rates {
                for seed in runner.seeds() {
                    cells.push((loss, agg, 1.0, rate, seed));
                }
            }
        }
    }
    let runs = runner.grid(cells);
    let mut passed = true;
    let mut parts = Vec::new();
    for loss in LISTWISE {
        let counts: Vec<usize> = rates
            .iter()
            .map(|&rate| {
                runner
                    .seeds()
                    .into_iter()
                    .filter(|&s| {
                        runs[&key(loss, AggregatorKind::Dora, 1.0, rate, s)].report.win_rate
                            >= runs[&key(loss, AggregatorKind::Erm, 1.0, rate, s)].report.win_rate
                    })
                    .count()
            })
            .collect();
        passed &= counts.iter().all(|&c| c >= 7);
        parts.push(format!(
            "{} {}",
            loss.name(),
            counts.iter().map(|c| format!("{c}/10")).collect::<Vec<_>>().join(" ")
        ));
    }
    verdict(passed, format!("DoRA win rate ≥ ERM at 20/40/60%: {}", parts.join("; ")))
}

fn lambda_ablation(runner: &Runner) -> Verdict {
    let lambdas = [0.5, 1.0, 2.0, 4.0];
    let mut cells = Vec::new();
    for loss in LISTWISE {
        for seed in runner.seeds() {
            cells.push((loss, AggregatorKind::Erm, 1.0, 0.0, seed));
            for lambda in lambdas {
                cells.push((loss, AggregatorKind::Dora, lambda, 0.0, seed));
            }
        }
    }
    let runs = runner.grid(cells);
    let mut passed = true;
    let mut parts = Vec::new();
    for loss in LISTWISE {
        let ok = runner
            .seeds()
            .into_iter()
            .filter(|&s| {
                let prepared = &runner.prepared[&s];
                let scatter = |p: &PolicyModel| logprob_scatter(p, &prepared.reference, &prepared.dataset).unwrap();
                let erm = scatter(&runs[&key(loss, AggregatorKind::Erm, 1.0, 0.0, s)].policy);
                let gaps: Vec<f64> = lambdas
                    .iter()
                    .map(|&l| scatter_gap(&scatter(&runs[&key(loss, AggregatorKind::Dora, l, 0.0, s)].policy), &erm).unwrap())
                    .collect();
                gaps.windows(2).all(|w| w[1] <= w[0])
            })
            .count();
        passed &= ok >= 7;
        parts.push(format!("{} {ok}/10", loss.name()));
    }
    verdict(passed, format!("gap to ERM nonincreasing in λ: {}", parts.join(", ")))
}

fn convergence() -> Verdict {
    let report = convergence_probe(&ProbeConfig::default()).unwrap();
    let slope = report.slope.unwrap_or(f64::NAN);
    let residual = report.residual_rms.unwrap_or(f64::NAN);
    verdict(
        slope <= -0.9 && residual <= 0.2,
        format!("slope {slope:.4}, residual {residual:.4}, gaps {:?}", report.gaps),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type().unwrap().is_dir() {
            for (k, v) in dir_bytes(&entry.path()) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else {
            out.insert(name, std::fs::read(entry.path()).unwrap());
        }
    }
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for cmd in ["generate", "train", "sweep"] {
            let status = Command::new(env!("CARGO_BIN_EXE_dora-lab"))
                .arg(cmd)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .env_remove("DORA_LAB_SEED")
                .output()
                .unwrap()
                .status;
            if !status.success() {
                return verdict(false, format!("{cmd} exited with {status}"));
            }
        }
        outputs.push(dir_bytes(&out));
    }
    let differing: Vec<&String> = outputs[0]
        .iter()
        .filter(|(k, v)| outputs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    verdict(
        differing.is_empty() && outputs[0].len() == outputs[1].len(),
        format!("{} files compared, {} differ", outputs[0].len(), differing.len()),
    )
}

fn main() {
    let started = Instant::now();
    let runner = Runner::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("dual-primal DRO equivalence", Box::new(dual_primal)),
        ("tilted-form identity", Box::new(tilted_form)),
        ("LSE limits", Box::new(lse_limits)),
        ("gradient exactness", Box::new(gradients)),
        ("Bayes-classifier recovery", Box::new(classifier_recovery)),
        ("calibration bound", Box::new(calibration_bound)),
        ("reduction identity", Box::new(reduction_identity)),
        ("mixture-shift trend", Box::new(|| mixture_shift(&runner))),
        ("corruption trend", Box::new(|| corruption(&runner))),
        ("λ ablation trend", Box::new(|| lambda_ablation(&runner))),
        ("convergence rate", Box::new(convergence)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.passed {
            failed += 1;
        }
        println!("{} criterion {:>2} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
