//! Command-line front end: `gflow train-toy|sample|rl|bench --config PATH
//! [--set key=value]...`.
//!
//! Every command writes `config.resolved.cfg` (all values, defaults
//! included) next to its outputs; rerunning with that file alone
//! reproduces the run.

mod bench;
pub mod config;
mod csv_out;
mod rl;
pub mod svg;
mod toy;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::par::configure_threads;
use crate::scheduler::Scheduler;
pub use config::RunConfig;

/// Environment variable bounding the worker pool.
pub const ENV_THREADS: &str = "GFLOW_THREADS";
pub const RESOLVED_CONFIG: &str = "config.resolved.cfg";

#[derive(Debug, Parser)]
#[command(name = "gflow", version, about = "Guided flow matching experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow on a Gaussian-mixture toy distribution.
    TrainToy(Common),
    /// Guided sampling over a grid of guidance weights.
    Sample(Common),
    /// Offline planning pipeline on the point-mass environment.
    Rl {
        #[arg(value_enum)]
        task: RlTask,
        #[command(flatten)]
        common: Common,
    },
    /// Sampling wall time against step count and batch size.
    Bench(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RlTask {
    GenData,
    TrainIdm,
    TrainPlanner,
    Eval,
    Sweep,
    Probe,
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain { .. } => 2,
        Error::Numeric(_) | Error::Singularity { .. } => 3,
        Error::Format(_) | Error::Io(_) => 1,
    }
}

/// Worker count from [`ENV_THREADS`], if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(ENV_THREADS) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{ENV_THREADS} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(threads_from_env()?);
    let common = match &cli.command {
        Command::TrainToy(c) | Command::Sample(c) | Command::Bench(c) => c,
        Command::Rl { common, .. } => common,
    };
    let mut cfg = RunConfig::load(&common.config)?;
    for s in &common.set {
        cfg.set(s)?;
    }
    match cli.command {
        Command::TrainToy(_) => toy::train_toy(cfg),
        Command::Sample(_) => toy::sample(cfg),
        Command::Rl { task, .. } => rl::run(task, cfg),
        Command::Bench(_) => bench::run(cfg),
    }
}

/// Keys every command reads.
pub(crate) struct Base {
    pub seed: u64,
    pub output: PathBuf,
    pub scheduler: Scheduler,
}

impl Base {
    pub fn read(cfg: &mut RunConfig) -> Result<Self> {
        Ok(Self {
            seed: cfg.get("seed", 0u64)?,
            output: PathBuf::from(cfg.require::<String>("output")?),
            scheduler: cfg.get("scheduler", Scheduler::Ot)?,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }
}

/// Rejects unknown keys, creates the output directory and writes the
/// resolved configuration into it.
pub(crate) fn start(cfg: &RunConfig, output: &Path) -> Result<()> {
    cfg.finish()?;
    std::fs::create_dir_all(output)?;
    std::fs::write(output.join(RESOLVED_CONFIG), cfg.resolved_text())?;
    Ok(())
}
