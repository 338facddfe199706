use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use renalseq_cli::{CliResult, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "renalseq",
    version,
    about = "Abnormal-creatinine prediction pipeline"
)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic patients, labs and ground truth.
    Synth,
    /// Apply eligibility and labelling rules and split the cohort.
    Cohort,
    /// Encode eligible patients as fixed-length sequences.
    Encode,
    /// Train the GRU classifier.
    Train,
    /// Score the test split: ROC, bootstrap CI, confusion matrix.
    Eval,
    /// Project test-set embeddings with t-SNE.
    Tsne,
    /// Render SVG figures from stage outputs.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg)?;
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::Cohort => Stage::Cohort,
        Command::Encode => Stage::Encode,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Tsne => Stage::Tsne,
        Command::Report => Stage::Report,
        Command::RunAll => return pipeline.run_all(),
        Command::PrintConfig => unreachable!("handled above"),
    };
    pipeline.run_stage(stage).map(|_| ())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(2)
        }
    }
}
