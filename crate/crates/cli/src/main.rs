//! `coin`: batch driver for data generation, training, evaluation and sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Default output root when `--out` is not given.
pub const OUTPUT_ROOT_VAR: &str = "COIN_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "coin",
    version,
    about = "Chance-constrained imitation learning for oversubscription"
)]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic telemetry trace file.
    GenData(GenDataArgs),
    /// Train one method on every seed.
    Train(TrainArgs),
    /// Evaluate saved policies and print a benchmark report.
    Eval(EvalArgs),
    /// Train and evaluate a method grid across training budgets and deltas.
    Sweep(SweepArgs),
    /// Rebuild the report and curve files of an earlier run directory.
    Report(ReportArgs),
}

/// Options shared by every command that resolves an experiment config.
/// Flags override values from `--config`.
#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// Experiment config (TOML); defaults to the built-in benchmark for `--env`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment used when no config file is given.
    #[arg(long, value_parser = ["cloud", "airline"])]
    pub env: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training budget on the trajectory-mean cost.
    #[arg(long)]
    pub g: Option<f64>,
    /// Violation probability for training and verdicts.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Evaluation episodes per policy.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Trace file replacing the synthetic cloud population.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; defaults to a fresh directory under $COIN_OUTPUT_ROOT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset spec (TOML); defaults to the cloud benchmark population.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of users; overrides `--spec`.
    #[arg(long)]
    pub users: Option<usize>,
    /// Steps per trace; overrides `--spec`.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Generation seed; overrides `--spec`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace file format.
    #[arg(long, value_parser = ["csv", "jsonl"], default_value = "csv")]
    pub format: String,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training method.
    #[arg(long, value_parser = ["coin", "bc", "bc_hard", "grid"])]
    pub method: String,
    /// Constant rate for `--method grid`.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Epochs between checkpoints; 0 disables them.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy files written by `train`; the i-th policy is evaluated with the i-th seed.
    #[arg(long, num_args = 1.., required = true)]
    pub policy: Vec<PathBuf>,
    /// Comma-separated verdict budgets.
    #[arg(long = "budgets", value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated methods; `grid` adds the configured grid rates.
    #[arg(long, value_delimiter = ',', default_value = "coin,bc,bc_hard,grid")]
    pub methods: Vec<String>,
    /// Comma-separated training budgets.
    #[arg(long = "train-g", value_delimiter = ',')]
    pub train_g: Option<Vec<f64>>,
    /// Comma-separated deltas.
    #[arg(long = "deltas", value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `train`, `eval` or `sweep`.
    #[arg(long)]
    pub dir: PathBuf,
    /// Comma-separated verdict budgets.
    #[arg(long = "budgets", value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    /// Verdict violation probability; defaults to the run's configured delta.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Output directory; defaults to `<dir>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl From<coin_core::Error> for CliError {
    fn from(e: coin_core::Error) -> Self {
        match e {
            coin_core::Error::Config(m) => CliError::Usage(format!("configuration error: {m}")),
            other => CliError::Run(other.to_string()),
        }
    }
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
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
