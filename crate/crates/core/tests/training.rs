use dora_core::checks::{gradient_checks, limit_checks, Fault, GRADIENT_TOLERANCE};
use dora_core::dro::AggregatorKind;
use dora_core::evalhub::{run_experiment, ExperimentSetup, Prepared};
use dora_core::losses::{LossKind, LossSpec, RewardOracle};
use dora_core::policy::{sft_train, PolicyModel, SftConfig};
use dora_core::trainer::{
    convergence_probe, run_phase2_with, self_train, Phase2Hooks, ProbeConfig, SelfTrainConfig, TrainConfig,
};
use dora_core::world::{build_world, generate_dataset, MixtureSpec};
use dora_core::Error;

fn small_setup(loss: LossKind, aggregator: AggregatorKind) -> ExperimentSetup {
    let mut setup = ExperimentSetup::default_shift(loss, aggregator);
    setup.dataset_size = 400;
    setup.train.epochs = 3;
    setup.eval.win_queries = 500;
    setup.eval.slope_samples = 500;
    setup
}

fn train(prepared: &Prepared, h: &[f64], loss: LossKind, aggregator: AggregatorKind) -> (PolicyModel, dora_core::trainer::TrainingLog) {
    let mut config = TrainConfig::new(LossSpec::dialogue(loss), aggregator);
    config.epochs = 3;
    config.seed = 17;
    run_phase2_with(&prepared.dataset, h, &prepared.reference, &config, Phase2Hooks::default()).unwrap()
}

#[test]
fn unit_calibration_reduces_to_uncalibrated_siblings() {
    let setup = small_setup(LossKind::DpoPl, AggregatorKind::Dora);
    let prepared = Prepared::new(&setup, 3).unwrap();
    let ones = vec![1.0; prepared.dataset.len()];
    for loss in LossKind::ALL {
        let (dora, dora_log) = train(&prepared, &ones, loss, AggregatorKind::Dora);
        let (dro, dro_log) = train(&prepared, &ones, loss, AggregatorKind::Dro);
        assert_eq!(dora, dro, "{}", loss.name());
        assert_eq!(dora_log, dro_log);
        let (rew, rew_log) = train(&prepared, &ones, loss, AggregatorKind::Reweight);
        let (erm, erm_log) = train(&prepared, &ones, loss, AggregatorKind::Erm);
        assert_eq!(rew, erm, "{}", loss.name());
        assert_eq!(rew_log, erm_log);
    }
}

#[test]
fn experiments_are_reproducible() {
    let setup = small_setup(LossKind::Rrhf, AggregatorKind::Dora);
    let a = run_experiment(&setup, &Prepared::new(&setup, 5).unwrap()).unwrap();
    let b = run_experiment(&setup, &Prepared::new(&setup, 5).unwrap()).unwrap();
    assert_eq!(a.policy.to_json().unwrap(), b.policy.to_json().unwrap());
    assert_eq!(a.log, b.log);
    assert_eq!(a.report, b.report);
    let c = run_experiment(&setup, &Prepared::new(&setup, 6).unwrap()).unwrap();
    assert_ne!(a.policy, c.policy);
}

#[test]
fn overflowing_run_aborts_with_step_diagnostics() {
    let setup = small_setup(LossKind::DpoPl, AggregatorKind::Dora);
    let prepared = Prepared::new(&setup, 1).unwrap();
    let mut config = setup.train.clone();
    config.loss.beta = 1e300;
    config.step_size = 1e300;
    let h = vec![1.0; prepared.dataset.len()];
    let err = run_phase2_with(&prepared.dataset, &h, &prepared.reference, &config, Phase2Hooks::default()).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, indices } => {
            assert!(step < 1000, "step {step}");
            assert_eq!(indices.len(), config.batch_size);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn reference_must_be_frozen() {
    let setup = small_setup(LossKind::DpoPl, AggregatorKind::Erm);
    let prepared = Prepared::new(&setup, 1).unwrap();
    let h = vec![1.0; prepared.dataset.len()];
    let err = run_phase2_with(
        &prepared.dataset,
        &h,
        &prepared.reference.unfrozen_copy(),
        &setup.train,
        Phase2Hooks::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}

#[test]
fn self_training_iterates_from_the_current_policy() {
    let setup = small_setup(LossKind::DpoPl, AggregatorKind::Dora);
    let world = build_world(&setup.world).unwrap();
    let spec = MixtureSpec::even(0.5, 4).unwrap();
    let oracle = RewardOracle::default();
    let data = generate_dataset(&world, &spec, &oracle, 400, 2).unwrap();
    let sft = sft_train(&data, 8, 8, &SftConfig::default()).unwrap();
    let config = SelfTrainConfig {
        train: setup.train.clone(),
        classifier: setup.classifier.clone(),
        dataset_size: 400,
        reuse_classifiers: false,
        seed: 4,
    };
    let out = self_train(&world, &spec, &oracle, &sft, 3, &config).unwrap();
    assert_eq!(out.len(), 3);
    for (i, (policy, metrics)) in out.iter().enumerate() {
        assert_eq!(metrics.iteration, i);
        assert!(metrics.target_kl.is_finite());
        assert!(metrics.mean_h_tilde > 0.0 && metrics.mean_h_tilde < 4.0);
        assert!(!policy.is_frozen());
    }
    assert_ne!(out[0].0, out[1].0);
    let again = self_train(&world, &spec, &oracle, &sft, 3, &config).unwrap();
    assert_eq!(out[2].0, again[2].0);
}

#[test]
fn every_gradient_matches_finite_differences() {
    let rows = gradient_checks(20, 99, Fault::None).unwrap();
    assert_eq!(rows.len(), 20 * (LossKind::ALL.len() + AggregatorKind::ALL.len()));
    for r in &rows {
        assert!(r.relative_error <= GRADIENT_TOLERANCE, "{} draw {}: {}", r.target, r.draw, r.relative_error);
    }
}

#[test]
fn broken_aggregator_slips_past_gradients_but_not_limits() {
    // The injected offset is constant in the losses, so only the limit checks see it.
    let rows = gradient_checks(3, 99, Fault::BrokenAggregator).unwrap();
    assert!(rows.iter().all(|r| r.relative_error.is_finite()));
    let limits = limit_checks(20, 99, Fault::BrokenAggregator).unwrap();
    assert!(limits.iter().any(|c| !c.passed));
    assert!(limit_checks(20, 99, Fault::None).unwrap().iter().all(|c| c.passed));
}

#[test]
fn convergence_probe_rate_is_inverse_linear() {
    let mut config = ProbeConfig::default();
    config.reference_steps = 200_000;
    let report = convergence_probe(&config).unwrap();
    assert!(!report.converged_at_init);
    assert!(report.gaps.windows(2).all(|w| w[1] < w[0]));
    let slope = report.slope.unwrap();
    assert!(slope <= -0.9, "slope {slope}");
}
