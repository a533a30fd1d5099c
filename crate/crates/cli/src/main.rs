//! `rfsurvey`: estimation, calibration and Monte Carlo studies from a TOML configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "rfsurvey", version, about = "Random-forest model-assisted estimation of finite-population totals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named configuration used instead of a file: table2-Y<m>-n<250|1000> or figure2.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed; overrides the `seed` key of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// One-shot estimation on a drawn or supplied sample.
    Estimate,
    /// Repeated-sampling study.
    Mc,
    /// Calibration weights for a problem file.
    Calibrate,
    /// Convergence of sample partitions to population partitions.
    H5Diag,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl From<rfsurvey::Error> for CliError {
    fn from(e: rfsurvey::Error) -> Self {
        use rfsurvey::Error as E;
        match e {
            _ if e.is_numeric() => CliError::Numeric(e.to_string()),
            E::Design(_) | E::InvalidParameter(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<rfsurvey_simlab::Error> for CliError {
    fn from(e: rfsurvey_simlab::Error) -> Self {
        use rfsurvey_simlab::Error as E;
        match e {
            E::Core(inner) => inner.into(),
            E::UnknownModel(_) | E::Config(_) => CliError::Config(e.to_string()),
            E::TooManyFailures { .. } => CliError::Numeric(e.to_string()),
            E::Csv(_) | E::Io(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {k} threads: {e}")))?;
    }
    let cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give either --config or --preset".into()))
        }
        (Some(path), None) => config::ExperimentConfig::load(path)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => return Err(CliError::Config("missing --config or --preset".into())),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(1);
    std::fs::create_dir_all(&cli.out)?;
    let ctx = commands::Context { cfg: &cfg, seed, out: &cli.out };
    match cli.command {
        Command::Estimate => commands::estimate(&ctx),
        Command::Mc => commands::mc(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::H5Diag => commands::h5_diag(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rfsurvey: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
