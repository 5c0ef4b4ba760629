mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pkg_core::eval::EvalOptions;
use pkg_core::guide::StrategyKind;

use config::{Overrides, PipelineConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Budget(String),
    Scoring(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Scoring(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Budget(m) => write!(f, "backend failure budget exceeded: {m}"),
            CliError::Scoring(m) => write!(f, "scoring error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "pkg", version, about = "Knowledge-guided generate-then-read pipeline")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Concurrent records; overrides `max_in_flight`.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    /// Score missing predictions as wrong instead of failing.
    #[arg(long, global = true)]
    allow_partial: bool,
    /// Exact match without answer normalization.
    #[arg(long, global = true)]
    strict_em: bool,
    /// Template override file; overrides `templates`.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export fine-tuning triples from the train split.
    Prepare,
    /// Build and save the BM25 index over the passage file.
    Index,
    /// Generate backgrounds and answers for the evaluation split.
    Run {
        /// Guiding strategy; overrides `strategy`.
        #[arg(long)]
        strategy: Option<StrategyKind>,
        /// Continue the latest run of this strategy, skipping finished records.
        #[arg(long)]
        resume: bool,
    },
    /// Score a predictions file (default: the latest run).
    Eval { predictions: Option<PathBuf> },
    /// Merge report files into one comparison table (default: latest report per strategy).
    Report { reports: Vec<PathBuf> },
    /// Drop superseded records from the response cache.
    CompactCache,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let strategy = match &cli.command {
        Command::Run { strategy, .. } => *strategy,
        _ => None,
    };
    let overrides = Overrides {
        output: cli.output.clone(),
        max_in_flight: cli.max_in_flight,
        templates: cli.templates.clone(),
        strategy,
    };
    let cfg = PipelineConfig::load(path, &overrides)?;
    let opts = EvalOptions {
        allow_partial: cli.allow_partial,
        strict_em: cli.strict_em,
    };
    match cli.command {
        Command::Prepare => commands::cmd_prepare(&cfg),
        Command::Index => commands::cmd_index(&cfg),
        Command::Run { resume, .. } => commands::cmd_run(&cfg, resume),
        Command::Eval { predictions } => commands::cmd_eval(&cfg, predictions.as_deref(), opts).map(drop),
        Command::Report { reports } => commands::cmd_report(&cfg, &reports).map(drop),
        Command::CompactCache => commands::cmd_compact_cache(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
