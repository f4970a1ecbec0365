mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtrme_core::ErrorCategory;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "dtrme", version, about = "Dynamic treatment regimes with error-prone covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the regime; writes coefficients and, with --out, rule/corrector artifacts.
    Fit(Shared),
    /// m-out-of-n bootstrap intervals for the blip coefficients.
    Bootstrap(Shared),
    /// Run a simulation study and write its summary table.
    Simulate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Recommend treatments for new patients from a saved rule.
    Predict(Shared),
}

#[derive(Args, Debug)]
struct Shared {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<dtrme_core::Error> for CliError {
    fn from(e: dtrme_core::Error) -> Self {
        let m = e.to_string();
        match e.category() {
            ErrorCategory::Config => CliError::Config(m),
            ErrorCategory::Data => CliError::Data(m),
            ErrorCategory::Numerical => CliError::Numerical(m),
        }
    }
}

fn load(shared: &Shared) -> Result<RunConfig, CliError> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &shared.data {
        cfg.data.path = Some(d.clone());
    }
    if shared.seed.is_some() {
        cfg.seed = shared.seed;
    }
    Ok(cfg)
}

fn set_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(s) => {
            set_threads(s.threads)?;
            commands::fit(&load(&s)?, s.out.as_deref())
        }
        Command::Bootstrap(s) => {
            set_threads(s.threads)?;
            commands::bootstrap(&load(&s)?, s.out.as_deref())
        }
        Command::Simulate {
            shared,
            scenario,
            n,
            replicates,
        } => {
            set_threads(shared.threads)?;
            let mut cfg = load(&shared)?;
            if scenario.is_some() {
                cfg.simulate.scenario = scenario;
            }
            if let Some(n) = n {
                cfg.simulate.overrides.insert("n".into(), n.into());
            }
            if let Some(r) = replicates {
                cfg.simulate
                    .overrides
                    .insert("replicates".into(), r.into());
            }
            commands::simulate(&cfg, shared.out.as_deref())
        }
        Command::Predict(s) => {
            set_threads(s.threads)?;
            commands::predict(&load(&s)?, s.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dtrme: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
