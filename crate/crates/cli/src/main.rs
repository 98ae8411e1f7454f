mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use saerad::error::SaeError;
use tracing_subscriber::EnvFilter;

use commands::{
    BaselineArgs, DescribeArgs, EvalArgs, GenDataArgs, GradCheckArgs, InterveneArgs, ReportArgs,
    TopKArgs, TrainArgs,
};

/// Sparse-autoencoder training, evaluation and feature-labeling pipeline.
#[derive(Debug, Parser)]
#[command(name = "saerad", version, subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice the command makes; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log filter, e.g. `info` or `saerad=debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic superposition corpus.
    GenData(GenDataArgs),
    /// Train an SAE from a JSON config.
    Train(TrainArgs),
    /// Sparsity and reconstruction metrics of a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    GradCheck(GradCheckArgs),
    /// Highest-activating examples per feature.
    TopK(TopKArgs),
    /// Label features from the reports of their top examples.
    Describe(DescribeArgs),
    /// Compose findings paragraphs from active feature descriptions.
    Report(ReportArgs),
    /// Nearest-neighbor report retrieval.
    Baseline(BaselineArgs),
    /// Counterfactual tokens by setting one latent feature.
    Intervene(InterveneArgs),
}

/// Errors in how the command was invoked rather than in its inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A gradient check exceeded its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: worst relative error {worst:.3e} > {tolerance:.1e}")]
pub struct GradCheckFailed {
    pub worst: f64,
    pub tolerance: f64,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICS: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<GradCheckFailed>() {
            return EXIT_NUMERICS;
        }
        if let Some(e) = cause.downcast_ref::<SaeError>() {
            return match e {
                e if e.is_numerics() => EXIT_NUMERICS,
                SaeError::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let filter = match EnvFilter::try_new(&cli.log_level) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: invalid --log-level {:?}: {e}", cli.log_level);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not start thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }

    let seed = cli.seed;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, seed),
        Command::Train(a) => commands::train(a, seed),
        Command::Eval(a) => commands::eval(a),
        Command::GradCheck(a) => commands::grad_check(a, seed),
        Command::TopK(a) => commands::top_k(a),
        Command::Describe(a) => commands::describe(a),
        Command::Report(a) => commands::report(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Intervene(a) => commands::intervene(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
