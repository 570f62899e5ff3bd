//! `schemalink`: build entity indexes, synthesize descriptions, fit
//! entity-type weights, link questions, and run benchmarks.

mod commands;
mod config;
mod error;
mod manifest;
mod providers;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::config::PipelineArgs;
use crate::error::Failure;

#[derive(Debug, Parser)]
#[command(name = "schemalink", version, about = "Entity-level schema linking for text-to-SQL")]
struct Cli {
    /// TOML file with [pipeline], [providers] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Entity index management.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Fill in missing table descriptions with the model.
    Describe(DescribeArgs),
    /// Fit entity-type weights on labelled questions.
    Calibrate(CalibrateArgs),
    /// Link one question to candidate tables.
    Link(LinkArgs),
    /// Run a benchmark and write a report.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// Decompose a catalog into entities and embed them.
    Build(IndexBuildArgs),
}

#[derive(Debug, Args)]
struct IndexBuildArgs {
    #[arg(long)]
    catalog: PathBuf,
    /// Comma-separated entity types, or `all`.
    #[arg(long, default_value = "all")]
    types: String,
    /// Embedding provider: `hash`, `hash:DIM` or `remote`.
    #[arg(long)]
    provider: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long)]
    catalog: PathBuf,
    /// Model provider: `scripted` or `remote`.
    #[arg(long)]
    provider: Option<String>,
    /// Replace existing descriptions too.
    #[arg(long)]
    overwrite: bool,
    /// Output catalog file.
    #[arg(long)]
    out: PathBuf,
}

/// Index location and the providers used against it.
#[derive(Debug, Args)]
struct IndexArgs {
    /// Directory written by `index build`.
    #[arg(long)]
    index: PathBuf,
    /// Catalog to link against (default: the copy stored with the index).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Embedding provider override; defaults to the one the index was built with.
    #[arg(long)]
    embedder: Option<String>,
    /// Model provider for prediction and SQL: `scripted` or `remote`.
    #[arg(long)]
    model: Option<String>,
    /// Model provider for keyword extraction (default: same as --model).
    #[arg(long)]
    keyword_model: Option<String>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    index: IndexArgs,
    /// JSON-lines file of labelled questions.
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = schemalink_core::calibration::DEFAULT_N_MAX)]
    n_max: usize,
    /// Questions sampled from the training file.
    #[arg(long, default_value_t = schemalink_core::calibration::DEFAULT_TRAINING_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LinkArgs {
    #[command(flatten)]
    index: IndexArgs,
    /// Entity-type weights from `calibrate` (default: uniform).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    question: String,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Rank the candidate tables with the model.
    #[arg(long)]
    predict: bool,
    /// Generate SQL over the predicted tables (implies --predict).
    #[arg(long)]
    sql: bool,
    #[arg(long)]
    dialect: Option<String>,
    /// Print only the candidate schema text.
    #[arg(long)]
    schema_only: bool,
    /// Write the result here (with a manifest) instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    index: IndexArgs,
    /// Entity-type weights from `calibrate` (default: uniform).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// JSON-lines benchmark file.
    #[arg(long)]
    dataset: PathBuf,
    /// entity_retriever, entity_full, bm25_tabledoc or dense_tabledoc.
    #[arg(long)]
    method: String,
    /// Comma-separated recall cutoffs.
    #[arg(long)]
    at: Option<String>,
    /// Give baselines the linker's schema token budget.
    #[arg(long)]
    budget_matched: bool,
    /// Generate SQL for every question.
    #[arg(long)]
    sql: bool,
    /// Evaluate a seeded sample of this many questions.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output report file.
    #[arg(long)]
    out: PathBuf,
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("SCHEMALINK_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .init();
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::config)?;
    }
    let file = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Index(IndexCommand::Build(a)) => commands::index_build(&file, a),
        Command::Describe(a) => commands::describe(&file, a),
        Command::Calibrate(a) => commands::calibrate(&file, a),
        Command::Link(a) => commands::link(&file, a),
        Command::Eval(a) => commands::eval(&file, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let failure = Failure::usage(e.render().to_string().trim_end());
            eprintln!("{}", failure.to_json());
            return ExitCode::from(failure.category.exit_code() as u8);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            tracing::error!(category = ?failure.category, "{}", failure.message);
            eprintln!("{}", failure.to_json());
            ExitCode::from(failure.category.exit_code() as u8)
        }
    }
}
