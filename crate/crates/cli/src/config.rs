use std::path::{Path, PathBuf};

use dora_core::checks::VerifyConfig;
use dora_core::dro::AggregatorKind;
use dora_core::evalhub::{EvalConfig, ExperimentSetup, SweepAxes};
use dora_core::calib::ClassifierConfig;
use dora_core::io::{canonical_hash, Provenance};
use dora_core::losses::{LossKind, RewardOracle};
use dora_core::policy::SftConfig;
use dora_core::seed::derive;
use dora_core::trainer::TrainConfig;
use dora_core::world::{MixtureSpec, WorldConfig};
use dora_core::Error;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DORA_LAB_SEED";
pub const FAULT_ENV: &str = "DORA_LAB_INJECT_FAULT";

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
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
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub sweep: Option<SweepAxes>,
}

impl ExperimentConfig {
    pub fn builtin() -> Self {
        let setup = ExperimentSetup::default_shift(LossKind::DpoPl, AggregatorKind::Dora);
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            world: setup.world,
            mixture: setup.mixture,
            oracle: setup.oracle,
            dataset_size: setup.dataset_size,
            classifier: setup.classifier,
            sft: setup.sft,
            train: setup.train,
            eval: setup.eval,
            verify: VerifyConfig::default(),
            sweep: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            world: self.world.clone(),
            mixture: self.mixture.clone(),
            oracle: self.oracle.clone(),
            dataset_size: self.dataset_size,
            classifier: self.classifier.clone(),
            sft: self.sft.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.setup().validate()?;
        if let Some(axes) = &self.sweep {
            axes.validate()?;
        }
        if self.verify.instances == 0 {
            return Err(Error::config("verify.instances", "must be positive"));
        }
        Ok(())
    }

    /// Hash over the canonical JSON of everything that shapes the data:
    /// world, mixture, oracle, dataset size and seed.
    pub fn data_hash(&self) -> Result<String, Error> {
        canonical_hash(&(
            &self.world,
            &self.mixture,
            &self.oracle,
            self.dataset_size,
            self.seed,
        ))
    }

    pub fn hash(&self) -> Result<String, Error> {
        canonical_hash(self)
    }

    pub fn provenance(&self) -> Result<Provenance, Error> {
        Ok(Provenance {
            config_hash: self.hash()?,
            seed: self.seed,
        })
    }

    /// Sweep axes, defaulting to the λ ablation over every aggregator.
    pub fn sweep_axes(&self) -> SweepAxes {
        self.sweep.clone().unwrap_or_else(|| SweepAxes {
            aggregators: AggregatorKind::ALL.to_vec(),
            losses: vec![self.train.loss.kind],
            lambdas: vec![0.5, 1.0, 2.0, 4.0],
            corruption_rates: vec![self.train.corruption_rate],
            seeds: (0..10).collect(),
        })
    }

    /// Global seed of sweep replicate `r`.
    pub fn replicate_seed(&self, r: u64) -> u64 {
        derive(self.seed, r)
    }
}

/// Where the effective seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Environment,
    Flag,
}

/// Applies `--seed` and then the environment override, flag first.
pub fn resolve_seed(config: &mut ExperimentConfig, flag: Option<u64>) -> Result<SeedSource, Error> {
    if let Some(s) = flag {
        config.seed = s;
        return Ok(SeedSource::Flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            config.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
            Ok(SeedSource::Environment)
        }
        _ => Ok(SeedSource::Config),
    }
}
