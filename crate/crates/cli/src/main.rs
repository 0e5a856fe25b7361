//! `dora-lab`: generate synthetic preference data, train and evaluate
//! calibrated robust aggregators, run verification suites and sweeps.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dora_core::checks::Fault;
use dora_core::Error;

use crate::commands::{Context, SweepStatus, VerifyFailed};
use crate::config::{resolve_seed, ExperimentConfig, FAULT_ENV};

#[derive(Parser)]
#[command(name = "dora-lab", version, about = "Calibrated robust preference alignment on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; the built-in default world is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed. Overrides both the config and DORA_LAB_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the world and sample the preference dataset.
    Generate(Common),
    /// Train classifiers, the SFT reference and the aligned policy.
    Train(Common),
    /// Evaluate a trained policy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; defaults to `policy.json` in the output directory.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Cross-check the robust risk solvers, gradients and limits.
    Verify(Common),
    /// Run the configured sweep, resuming from finished cells.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Stop after this many new cells and leave a RESUME.json behind.
        #[arg(long)]
        max_cells: Option<usize>,
    },
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerifyFailed>().is_some() {
        return EXIT_VERIFY;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        Some(Error::NonFiniteLoss { .. } | Error::NonFinite(_)) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn context(common: &Common) -> anyhow::Result<Context> {
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Error::config("--jobs", "must be positive").into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::builtin(),
    };
    let seed_source = resolve_seed(&mut config, common.seed)?;
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("dora-out"));
    Ok(Context {
        config,
        seed_source,
        out,
    })
}

fn fault_from_env() -> anyhow::Result<Fault> {
    match std::env::var(FAULT_ENV) {
        Ok(v) if !v.is_empty() => Ok(serde_json::from_value(serde_json::Value::String(v.clone()))
            .map_err(|_| Error::config(FAULT_ENV, format!("unknown fault {v:?}")))?),
        _ => Ok(Fault::None),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let manifest = commands::generate(&context(&common)?)?;
            println!("wrote {}", manifest.display());
        }
        Command::Train(common) => {
            let manifest = commands::train(&context(&common)?)?;
            println!("wrote {}", manifest.display());
        }
        Command::Eval { common, policy } => {
            let manifest = commands::eval(&context(&common)?, policy.as_deref())?;
            println!("wrote {}", manifest.display());
        }
        Command::Verify(common) => {
            let fault = fault_from_env()?;
            let manifest = commands::verify_cmd(&context(&common)?, fault)?;
            println!("verification passed; wrote {}", manifest.display());
        }
        Command::Sweep { common, max_cells } => match commands::sweep(&context(&common)?, max_cells)? {
            SweepStatus::Complete(manifest) => println!("wrote {}", manifest.display()),
            SweepStatus::Partial { remaining } => {
                println!("sweep paused with {remaining} cells remaining; rerun to resume")
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
