//! `quantlaw` command-line front end.
//!
//! Exit codes: 0 ok, 2 usage, 3 bad input, 4 infeasible ratio, 5 numeric
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quantlaw::error::ErrorClass;

#[derive(Debug, Parser)]
#[command(
    name = "quantlaw",
    version,
    about = "Mixed-precision PTQ search and loss-degeneration laws"
)]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "QUANTLAW_LOG", default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Random search over quantization plans; appends one run per ratio.
    Search(SearchArgs),
    /// Fit a weak or strong law to logged runs.
    Fit(FitArgs),
    /// Evaluate a fitted law at one point.
    Predict(PredictArgs),
    /// Invert a fitted law for a loss budget.
    Plan(PlanArgs),
    /// Generate synthetic runs from law parameters.
    Synth(SynthArgs),
    /// Pool logged runs into a contour table and write it as CSV.
    ExportContour(ExportArgs),
    /// Write a random-init checkpoint.
    Init(InitArgs),
    /// Write a token file for evaluation.
    Tokens(TokensArgs),
}

#[derive(Debug, Args)]
struct ModelSource {
    /// Preset name (clm-micro) or path to a JSON model config.
    #[arg(long, default_value = "clm-micro")]
    model: String,
    /// Checkpoint file.
    #[arg(
        long,
        conflicts_with = "init_seed",
        required_unless_present = "init_seed"
    )]
    ckpt: Option<PathBuf>,
    /// Build a random-init checkpoint from this seed instead of loading one.
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Token file (little-endian u32 ids).
    #[arg(long)]
    tokens: PathBuf,
    /// Low-precision format, e.g. mxint4:32 or affine4:64.
    #[arg(long)]
    method: String,
    /// Quantize weights and activations (default).
    #[arg(long, conflicts_with = "weight_only")]
    wa: bool,
    /// Quantize weights only.
    #[arg(long)]
    weight_only: bool,
    /// Site granularity: layer or matmul.
    #[arg(long, default_value = "matmul")]
    granularity: String,
    /// Comma-separated target ratios.
    #[arg(long, value_delimiter = ',', required = true)]
    qr: Vec<f64>,
    /// Block size; must match the method's.
    #[arg(long)]
    qb: Option<usize>,
    /// Trials per ratio.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Search seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allowed |achieved - target| ratio gap.
    #[arg(long, default_value_t = quantlaw::search::DEFAULT_RATIO_TOLERANCE)]
    ratio_tolerance: f64,
    /// Run log to append to (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for trials.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Derive run ids from the inputs instead of the clock.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Run logs to pool.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// weak or strong.
    #[arg(long, default_value = "weak")]
    law: String,
    /// opt (minimum) or mean.
    #[arg(long, default_value = "opt")]
    target: String,
    /// Fit document to write (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Fit document.
    #[arg(long)]
    fit: PathBuf,
    /// Model size, billions of non-embedding parameters.
    #[arg(long)]
    n: f64,
    #[arg(long)]
    qr: f64,
    #[arg(long, default_value_t = 32)]
    qb: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Fit document.
    #[arg(long)]
    fit: PathBuf,
    /// Loss-degeneration budget.
    #[arg(long)]
    budget: f64,
    /// Model size (billions): report the largest feasible ratio.
    #[arg(long, conflicts_with = "qr", required_unless_present = "qr")]
    n: Option<f64>,
    /// Ratio: report the smallest feasible model size.
    #[arg(long)]
    qr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    qb: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Law parameters (JSON).
    #[arg(long)]
    params: PathBuf,
    /// Grid of experiment points (JSON array).
    #[arg(long)]
    grid: PathBuf,
    /// Log-normal noise sigma.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Format recorded on the runs; its block size is replaced by each point's qb.
    #[arg(long, default_value = "mxint4:32")]
    method: String,
    /// Run log to append to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long, default_value = "clm-micro")]
    model: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TokensArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Number of tokens.
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Draw ids uniformly instead of sampling from the model.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Input => 3,
        ErrorClass::Infeasible => 4,
        ErrorClass::Numeric => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    let result = match cli.command {
        Command::Search(a) => commands::search(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Plan(a) => commands::plan(a),
        Command::Synth(a) => commands::synth(a),
        Command::ExportContour(a) => commands::export_contour(a),
        Command::Init(a) => commands::init(a),
        Command::Tokens(a) => commands::tokens(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
