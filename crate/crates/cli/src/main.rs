//! `matsae`: train, evaluate and interpret Matryoshka sparse autoencoders
//! over precomputed image embeddings.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use matsae_core::{Error, ErrorKind};

mod commands;
mod config;
mod manifest;
mod report;

#[derive(Parser, Debug)]
#[command(name = "matsae", version, about, propagate_version = true)]
struct Cli {
    /// TOML (or .json) configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `matsae_core=debug`
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted sparse-dictionary dataset with a split
    Synth(commands::SynthArgs),
    /// Validate an external embeddings + metadata pair and split it
    Ingest(commands::IngestArgs),
    /// Train one SAE configuration
    Train(commands::TrainCmdArgs),
    /// Train and evaluate a grid of configurations, then rank them
    Sweep(commands::SweepArgs),
    /// Reconstruction, sparsity, monosemanticity and probe metrics
    Eval(commands::EvalCmdArgs),
    /// Per-feature coherence, specificity and M
    Score(commands::ScoreArgs),
    /// Build a fingerprint index and measure retrieval quality
    Retrieve(commands::RetrieveArgs),
    /// Generate and judge concept descriptions for top features
    Interpret(commands::InterpretArgs),
    /// Retrieve samples for a text query through matched concepts
    Query(commands::QueryArgs),
    /// Text tables and SVG charts from report files
    Report(commands::ReportArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::External => 5,
    }
}

fn run(cli: Cli) -> matsae_core::Result<()> {
    let cfg = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Ingest(a) => commands::ingest(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Sweep(a) => commands::sweep(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Score(a) => commands::score(cfg, a),
        Command::Retrieve(a) => commands::retrieve(cfg, a),
        Command::Interpret(a) => commands::interpret(cfg, a),
        Command::Query(a) => commands::query(cfg, a),
        Command::Report(a) => commands::report(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
