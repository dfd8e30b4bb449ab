mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use commands::EvalKind;
use config::FlagOverrides;

/// Byte-level BPE, masked-language-model pretraining, probing heads and
/// evaluation for Czech NLP.
#[derive(Parser)]
#[command(name = "mlmkit", version)]
struct Cli {
    /// TOML configuration file. Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory. Training commands default to `mlmkit-out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from `data.corpus`.
    TokenizerTrain,
    /// Pretrain a transformer encoder with masked-token prediction on `data.corpus`.
    Pretrain,
    /// Train and evaluate a task head on top of an (optional) pretrained encoder.
    Probe {
        #[arg(value_enum)]
        task: ProbeTask,
    },
    /// Score a system file against a gold file.
    Evaluate {
        #[arg(value_enum)]
        kind: EvalKind,
        gold: PathBuf,
        system: PathBuf,
    },
    /// Collect `metrics-*.json` from run directories into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeTask {
    /// Tagging, lemmatization and dependency parsing on CoNLL-U.
    Tagger,
    /// Three-way polarity classification with fine-tuning.
    Sentiment,
}

const DEFAULT_OUT: &str = "mlmkit-out";

fn run(cli: Cli) -> Result<()> {
    let flags = FlagOverrides {
        seed: cli.seed,
        threads: cli.threads,
    };
    let out = cli.out.clone();
    match cli.command {
        Command::Evaluate { kind, gold, system } => commands::evaluate(kind, &gold, &system, out.as_deref()),
        Command::Report { runs } => commands::report(&runs, out.as_deref()),
        command => {
            let (required, optional) = match command {
                Command::TokenizerTrain => commands::TOKENIZER_INPUTS,
                Command::Pretrain => commands::PRETRAIN_INPUTS,
                Command::Probe {
                    task: ProbeTask::Tagger,
                } => commands::TAGGER_INPUTS,
                Command::Probe {
                    task: ProbeTask::Sentiment,
                } => commands::SENTIMENT_INPUTS,
                Command::Evaluate { .. } | Command::Report { .. } => unreachable!(),
            };
            let (cfg, inputs) = config::load(cli.config.as_deref(), &flags, required, optional)?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.config.run.threads)
                .build_global()
                .context("configuring the thread pool")?;
            let out = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            match command {
                Command::TokenizerTrain => commands::tokenizer_train(&cfg, &inputs, &out),
                Command::Pretrain => commands::pretrain(&cfg, &inputs, &out),
                Command::Probe {
                    task: ProbeTask::Tagger,
                } => commands::probe_tagger(&cfg, &inputs, &out),
                Command::Probe {
                    task: ProbeTask::Sentiment,
                } => commands::probe_sentiment(&cfg, &inputs, &out),
                Command::Evaluate { .. } | Command::Report { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
