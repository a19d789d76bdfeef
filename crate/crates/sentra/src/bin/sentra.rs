//! Configuration-driven pipeline CLI.
//!
//! Exit codes: 0 success, 1 validation error, 2 missing upstream artifact,
//! 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sentra::config::ExperimentConfig;
use sentra::error::SentraError;
use sentra::pipeline::Pipeline;

#[derive(Parser)]
#[command(
    name = "sentra",
    about = "Detect LLM-generated text from selected-next-token-probability sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set sentra.dim=32
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default desk-scale configuration to a file.
    InitConfig {
        /// Destination path.
        path: PathBuf,
        /// Experiment output directory recorded in the config.
        #[arg(long, default_value = "runs/desk")]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic corpus family.
    SynthCorpus(ConfigArgs),
    /// Train the shared tokenizer on the seed corpora.
    TrainTokenizer(ConfigArgs),
    /// Train the two probability sources and the text encoder.
    TrainLm(ConfigArgs),
    /// Compute and cache SNTP sequences for every document.
    ExtractSntp(ConfigArgs),
    /// Contrastive pre-training against the frozen text encoder.
    Pretrain(ConfigArgs),
    /// Fine-tune detectors for every (held-out key, seed) cell.
    Finetune(ConfigArgs),
    /// Score test documents with every enabled detector.
    Score(ConfigArgs),
    /// Compute AUROC / weighted-F1 and aggregate Avg and W.
    Evaluate(ConfigArgs),
    /// Render the evaluation table.
    Report(ConfigArgs),
    /// Run a matched comparison along one axis.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// pretraining | k | lm-pair
        #[arg(long)]
        axis: String,
    },
}

fn pipeline(args: &ConfigArgs) -> Result<Pipeline, SentraError> {
    let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    Ok(Pipeline::new(cfg))
}

fn run() -> Result<(), SentraError> {
    let cli = Cli::parse();
    match cli.command {
        Command::InitConfig { path, out_dir, force } => {
            if path.exists() && !force {
                return Err(SentraError::Config(format!(
                    "{} exists; pass --force to overwrite",
                    path.display()
                )));
            }
            let cfg = ExperimentConfig::desk_default(&out_dir);
            std::fs::write(&path, cfg.to_toml()?)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::SynthCorpus(a) => pipeline(&a)?.synth_corpus(),
        Command::TrainTokenizer(a) => pipeline(&a)?.train_tokenizer(),
        Command::TrainLm(a) => pipeline(&a)?.train_lm(),
        Command::ExtractSntp(a) => pipeline(&a)?.extract_sntp(),
        Command::Pretrain(a) => pipeline(&a)?.pretrain(),
        Command::Finetune(a) => pipeline(&a)?.finetune(),
        Command::Score(a) => pipeline(&a)?.score(),
        Command::Evaluate(a) => pipeline(&a)?.evaluate(),
        Command::Report(a) => {
            let table = pipeline(&a)?.report()?;
            println!("{table}");
            Ok(())
        }
        Command::Ablate { config, axis } => {
            let table = pipeline(&config)?.ablate(&axis)?;
            println!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
