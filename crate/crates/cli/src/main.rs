//! `cpl`: command-line front end for the pseudo-label pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpl_core::runner::{run_stage, PipelineConfig, RunError, StageName};

#[derive(Parser)]
#[command(name = "cpl", version, about = "Clean pseudo-labels from zero-shot VLM outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for synthesis, clustering and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override as KEY=VALUE, repeatable; dotted keys reach nested fields (e.g. hcs.epochs=50).
    #[arg(long = "stage-overrides", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth,
    /// Zero-shot probabilities from features and class embeddings.
    Zeroshot,
    /// Multi-view consensus selection.
    Mvc,
    /// Prior-free clustering filter on the MVC subset.
    Pfc,
    /// Train the cross-supervised probe pair.
    Hcs,
    /// Slide-level pipeline and pseudo-labels.
    Wsi,
    /// Score every available artifact against ground truth.
    Eval,
    /// zeroshot, mvc, pfc, hcs, wsi (when slides exist) and eval in order.
    Pipeline,
}

impl Command {
    fn stage(self) -> StageName {
        match self {
            Command::Synth => StageName::Synth,
            Command::Zeroshot => StageName::Zeroshot,
            Command::Mvc => StageName::Mvc,
            Command::Pfc => StageName::Pfc,
            Command::Hcs => StageName::Hcs,
            Command::Wsi => StageName::Wsi,
            Command::Eval => StageName::Eval,
            Command::Pipeline => StageName::Pipeline,
        }
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, RunError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.with_overrides(&cli.overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match build_config(&cli).and_then(|config| run_stage(cli.command.stage(), &config)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
