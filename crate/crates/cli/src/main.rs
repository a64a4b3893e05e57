//! `mlmc-grad`: run, probe and sweep multilevel gradient estimators.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime failure (I/O, numerics, unsupported operation) |
//! | 2 | malformed configuration or command line |
//! | 3 | iterate diverged |
//! | 4 | estimator inapplicable to the instance |
//! | 5 | budget, cost or level overflow |
//! | 6 | `--assert` band check failed |

mod commands;
mod config;
mod presets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlmc_grad::Error;

use crate::config::Config;

pub const OUT_ENV: &str = "MLMC_GRAD_OUT";
const DEFAULT_OUT: &str = "mlmc-out";

#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Io(String),
    Core(Error),
    Assertion(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) | CliError::Core(Error::InvalidInput(_)) => 2,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Core(Error::Inapplicable { .. }) => 4,
            CliError::Core(Error::BudgetOverflow(_) | Error::LevelOverflow { .. }) => 5,
            CliError::Assertion(_) => 6,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mlmc-grad", version, about = "Multilevel Monte Carlo gradient estimators for biased oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding `io.seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; falls back to `io.out`, then $MLMC_GRAD_OUT, then ./mlmc-out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Exit with code 6 when a reported statistic misses its band.
    #[arg(long, global = true)]
    assert: bool,
    /// Named configuration: table1-sc or queue-f2.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Build RU/RR estimators even when b <= c.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress the one-line report on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one optimization and write trajectory.csv.
    Run,
    /// Measure a per-level rate and write probe_<statistic>.csv.
    Probe {
        /// variance, bias, sr-bias or cost.
        #[arg(long)]
        kind: Option<String>,
        /// Instance name, overriding the configuration.
        #[arg(long)]
        instance: Option<String>,
    },
    /// Cost-to-accuracy sweep and paired comparison; writes sweep.csv and summary.csv.
    Sweep,
    /// Grid-search the queue objective and write grid.csv.
    Grid {
        /// Grid spacing, overriding `bench.resolution`.
        #[arg(long)]
        resolution: Option<f64>,
    },
}

pub struct Common {
    pub jobs: usize,
    pub quiet: bool,
}

fn load(args: &CommonArgs, instance: Option<&str>, needs_file: bool) -> Result<Config, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => return Err(CliError::Parse("--config and --preset are mutually exclusive".into())),
        (Some(path), None) => Config::load(path)?,
        (None, Some(name)) => presets::preset(name).ok_or_else(|| {
            CliError::Parse(format!("unknown preset '{name}', expected one of {}", presets::NAMES.join(", ")))
        })?,
        (None, None) => match instance {
            Some(_) => Config::minimal("cso_toy"),
            None if needs_file => return Err(CliError::Parse("no configuration: pass --config or --preset".into())),
            None => Config::minimal("queue"),
        },
    };
    if let Some(name) = instance {
        cfg.instance.kind = name.to_string();
    }
    if let Some(seed) = args.seed {
        cfg.io.seed = seed;
    }
    if args.force {
        cfg.estimator.force = true;
    }
    // Re-validate after command-line overrides.
    Config::parse(&cfg.echo(), "command line")
}

fn out_dir(args: &CommonArgs, cfg: &Config) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.io.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let args = &cli.common;
    if args.jobs == 0 {
        return Err(CliError::Parse("--jobs must be at least 1".into()));
    }
    let common = Common { jobs: args.jobs, quiet: args.quiet };
    let passed = match &cli.command {
        Command::Run => {
            let cfg = load(args, None, true)?;
            commands::run(&cfg, &common, &out_dir(args, &cfg))?;
            true
        }
        Command::Probe { kind, instance } => {
            let cfg = load(args, instance.as_deref(), true)?;
            let kind = kind.clone().or_else(|| cfg.bench.probe.clone()).unwrap_or_else(|| "variance".into());
            commands::probe(&cfg, &kind, &common, &out_dir(args, &cfg))?
        }
        Command::Sweep => {
            let cfg = load(args, None, true)?;
            commands::sweep(&cfg, &common, &out_dir(args, &cfg))?
        }
        Command::Grid { resolution } => {
            let mut cfg = load(args, None, false)?;
            if resolution.is_some() {
                cfg.bench.resolution = *resolution;
                cfg = Config::parse(&cfg.echo(), "command line")?;
            }
            commands::grid(&cfg, &common, &out_dir(args, &cfg))?;
            true
        }
    };
    if args.assert && !passed {
        return Err(CliError::Assertion("a reported statistic is outside its band (see summary.csv)".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlmc-grad: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
