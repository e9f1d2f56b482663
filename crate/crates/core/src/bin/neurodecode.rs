//! Command-line entry point: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use neurodecode::config::ExperimentConfig;
use neurodecode::pipeline::{run_all, run_stage, RunDir, Stage, StageOutcome, StageStatus, RUN_ROOT_ENV};
use neurodecode::Result;

#[derive(Parser)]
#[command(name = "neurodecode", version, about = "Whole-brain visual decoding on a synthetic world")]
struct Cli {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to `$NEURODECODE_RUN_ROOT/<name>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Run name used when `--run-dir` is absent.
    #[arg(long, global = true, default_value = "default")]
    name: String,
    /// Dotted-path override, e.g. `--set prior.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic world, trials and scenarios.
    Synth,
    /// Condition series and cut stimulus clips.
    Preprocess,
    /// Self-supervised next-TR pretraining of the fMRI encoder.
    Pretrain,
    /// Trimodal contrastive alignment.
    Contrastive,
    /// Diffusion prior and image decoder.
    Prior,
    /// Reconstruct test images.
    Reconstruct,
    /// Compute the metric table.
    Evaluate,
    /// K-means over image latents.
    Cluster,
    /// Input-gradient saliency over parcels.
    Saliency,
    /// Network ablations.
    Ablate,
    /// Zero-shot scenario identification and scale analysis.
    Zeroshot,
    /// Assemble the report and figures.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Preprocess => Stage::Preprocess,
            Command::Pretrain => Stage::Pretrain,
            Command::Contrastive => Stage::Contrastive,
            Command::Prior => Stage::Prior,
            Command::Reconstruct => Stage::Reconstruct,
            Command::Evaluate => Stage::Evaluate,
            Command::Cluster => Stage::Cluster,
            Command::Saliency => Stage::Saliency,
            Command::Ablate => Stage::Ablate,
            Command::Zeroshot => Stage::Zeroshot,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn report(o: &StageOutcome) {
    let status = match o.status {
        StageStatus::Ran => "ran",
        StageStatus::Cached => "cached",
    };
    println!("{:<12} {:<7} {}", o.stage.name(), status, &o.record.stage_hash[..12]);
}

fn run(cli: &Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&cli.overrides)?;
    let run_dir = match &cli.run_dir {
        Some(p) => RunDir::new(p),
        None => RunDir::from_env(&cli.name),
    };
    log::debug!("run directory {} ({RUN_ROOT_ENV})", run_dir.root.display());
    match cli.command.stage() {
        Some(stage) => report(&run_stage(&run_dir, stage, &cfg)?),
        None => run_all(&run_dir, &cfg)?.iter().for_each(report),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
