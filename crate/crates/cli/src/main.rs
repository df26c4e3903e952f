//! `hbp train|verify|bench --config <path> [--out <dir>] [--seed-override <int>]`
//!
//! Exit codes: 0 success, 1 config error, 2 numeric failure,
//! 3 verification failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<hbp::Error> for CliError {
    fn from(e: hbp::Error) -> Self {
        match e {
            hbp::Error::NonFinite(_) | hbp::Error::Asymmetric { .. } => CliError::Numeric(e.to_string()),
            hbp::Error::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "hbp", version, about = "Hessian backpropagation: training, verification and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network per seed and write metrics CSVs.
    Train(RunArgs),
    /// Check curvature blocks against finite differences and each other.
    Verify(RunArgs),
    /// Time the forward, gradient and curvature passes.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the configured seeds with this one.
    #[arg(long)]
    seed_override: Option<u64>,
}

fn effective(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed_override {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

type Handler = fn(&RunConfig) -> Result<(), CliError>;

fn execute(command: Command) -> Result<(), CliError> {
    let (args, f): (RunArgs, Handler) = match command {
        Command::Train(a) => (a, run::train),
        Command::Verify(a) => (a, run::verify),
        Command::Bench(a) => (a, run::bench),
    };
    let cfg = effective(&args)?;
    run::prepare_out(&cfg)?;
    f(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
