//! `denn`: trains the network ensemble, measures layer generality with
//! SVCCA, and runs the transfer-learning protocol. Each stage reads and
//! writes below one output root and records the hashes of what it produced.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use denn_core::generality::XTenths;

pub mod commands;
pub mod config;
pub mod store;

use config::{ConfigError, ExperimentConfig, Plan, OUT_ENV};
use store::StoreError;

#[derive(Debug, Parser)]
#[command(name = "denn", version, about = "Layer generality of networks trained on a Poisson family")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every (width, x', seed) network not yet complete.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Similarity matrices, decomposed statistics and line data per width.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Dimensionality, reproducibility and specificity against width.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Selffer and transfer recipients and the transfer specificity.
    Transfer {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference reference fields and network errors against them.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Principal and canonical component fields of one network layer.
    Components {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
        #[arg(long)]
        layer: Option<usize>,
        /// Seed of a second network; exports canonical components of the pair.
        #[arg(long)]
        compare_seed: Option<u64>,
        /// Source position of the second network (defaults to --xprime).
        #[arg(long, allow_negative_numbers = true)]
        compare_xprime: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output root; overrides DENN_OUT and `output.root`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides `output.jobs`.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct Select {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub xprime: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Store(StoreError),
    #[error("{0}")]
    Failed(String),
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Unlisted(..) | StoreError::HashMismatch(..) | StoreError::NoManifest(..) => {
                CliError::MissingInput(e.to_string())
            }
            other => CliError::Store(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Numerical(_) => 5,
            CliError::Store(_) | CliError::Failed(_) => 1,
        }
    }

    pub(crate) fn failed(context: &str, e: impl std::fmt::Display) -> Self {
        CliError::Failed(format!("{context}: {e}"))
    }
}

/// Everything a stage needs: the validated plan, where to write and how many
/// workers to use.
pub struct Context {
    pub config: ExperimentConfig,
    pub plan: Plan,
    pub root: PathBuf,
    pub jobs: usize,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self, CliError> {
        let config = ExperimentConfig::load(&common.config)?;
        let plan = config.resolve()?;
        let root = match (&common.out, std::env::var_os(OUT_ENV)) {
            (Some(out), _) => out.clone(),
            (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
            _ => config.output.root.clone(),
        };
        let jobs = common.jobs.unwrap_or(config.output.jobs);
        if jobs == 0 {
            return Err(ConfigError {
                path: "--jobs".into(),
                message: "must be at least 1".into(),
            }
            .into());
        }
        Ok(Context { config, plan, root, jobs })
    }

    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| CliError::failed("worker pool", e))
    }

    pub(crate) fn check_width(&self, width: Option<usize>) -> Result<(), CliError> {
        match width {
            Some(w) if !self.plan.widths.contains(&w) => Err(ConfigError {
                path: "--width".into(),
                message: format!("{w} is not in experiment.widths"),
            }
            .into()),
            _ => Ok(()),
        }
    }

    pub(crate) fn xprime(&self, flag: &str, x: f64) -> Result<XTenths, CliError> {
        let bad = |message: String| ConfigError {
            path: flag.into(),
            message,
        };
        let t = XTenths::from_f64(x).map_err(|_| bad(format!("{x} is not a multiple of 0.1")))?;
        if !self.plan.positions.contains(&t) {
            return Err(bad(format!("{t} is not on experiment.x_grid")).into());
        }
        Ok(t)
    }

    pub(crate) fn check_seed(&self, flag: &str, seed: Option<u64>) -> Result<(), CliError> {
        match seed {
            Some(s) if s >= self.plan.seeds => Err(ConfigError {
                path: flag.into(),
                message: format!("{s} is outside 0..{}", self.plan.seeds),
            }
            .into()),
            _ => Ok(()),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, select } => commands::train(&Context::new(&common)?, &select),
        Command::Analyze { common, width } => commands::analyze(&Context::new(&common)?, width),
        Command::Metrics { common, width } => commands::metrics(&Context::new(&common)?, width),
        Command::Transfer { common } => commands::transfer(&Context::new(&common)?),
        Command::Oracle { common, select } => commands::oracle(&Context::new(&common)?, &select),
        Command::Components {
            common,
            select,
            layer,
            compare_seed,
            compare_xprime,
        } => commands::components(
            &Context::new(&common)?,
            &select,
            &commands::Compare {
                layer,
                seed: compare_seed,
                xprime: compare_xprime,
            },
        ),
    }
}
