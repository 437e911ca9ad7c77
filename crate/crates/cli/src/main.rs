use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smlab_cli::{CliError, MaskSpec, Overrides, RunConfig};
use smlab_core::scenario::{ChunkRecord, Scenario};

#[derive(Parser)]
#[command(name = "smlab", version, about = "Sentence-final particle acquisition with a small masked language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Training {
    /// Stop after this epoch (the schedule is truncated).
    #[arg(long)]
    epochs: Option<usize>,
    /// Evaluation epochs, e.g. "1,2,4,8,16".
    #[arg(long)]
    schedule: Option<String>,
    /// Draw fresh maskings every epoch instead of reusing the first.
    #[arg(long)]
    remask_per_epoch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate the universe and write one sample/train/test split.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate a single trial.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Run all trials and write curves, confusions and the phase report.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// Trials to run in parallel.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Show predictions and attention of a checkpoint on one chunk.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON chunk record; utterances may contain [MASK] words.
        #[arg(long)]
        record: String,
        /// prev, cur, record, or comma-separated positions.
        #[arg(long, default_value = "record")]
        mask: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Write attention weights as CSV here.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Plot the mean rows of a curves CSV as SVG.
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, training: Option<&Training>, workers: Option<usize>) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        epochs: training.and_then(|t| t.epochs),
        workers,
        schedule: training.and_then(|t| t.schedule.clone()),
        remask_per_epoch: training.is_some_and(|t| t.remask_per_epoch),
    };
    base.resolve(&overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let config = resolve(&common, None, None)?;
            let stats = smlab_cli::generate(&config)?;
            println!(
                "universe {} chunks ({} with two utterances), ne {} yo {} (ratio {:.3}), fingerprint {}",
                stats.universe_size,
                stats.two_utterance_chunks,
                stats.ne_final,
                stats.yo_final,
                stats.ne_to_yo,
                stats.fingerprint
            );
            println!("wrote {}", config.out.display());
        }
        Command::Train { common, training } => {
            let config = resolve(&common, Some(&training), None)?;
            let trial = smlab_cli::train(&config)?;
            println!(
                "trained {} epochs; questions i/ii/iii = {:?}; wrote {}",
                trial.trained_epochs,
                trial.question_counts,
                config.out.display()
            );
        }
        Command::Experiment {
            common,
            training,
            workers,
        } => {
            let config = resolve(&common, Some(&training), workers)?;
            let summary = smlab_cli::experiment(&config)?;
            print!("{}", summary.render());
            println!("wrote {}", config.out.display());
        }
        Command::Probe {
            config,
            checkpoint,
            record,
            mask,
            top_k,
            attention,
        } => {
            let base = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            let config = base.resolve(&Overrides::default())?;
            let scenario = Scenario::new(config.scenario)?;
            let record: ChunkRecord =
                serde_json::from_str(&record).map_err(|e| CliError::Probe(format!("record: {e}")))?;
            let report = smlab_cli::probe(&scenario, &checkpoint, &record, &MaskSpec::parse(&mask)?, top_k)?;
            print!("{}", report.render());
            if let Some(path) = attention {
                fs::write(&path, report.attention_csv()).map_err(|source| CliError::Io { path, source })?;
            }
        }
        Command::Plot { input, out } => smlab_cli::plot(&input, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
