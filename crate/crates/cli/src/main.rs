//! `xlembed`: train, embed, evaluate and sweep cross-lingual sentence
//! encoders from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xlembed::ErrorKind;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<xlembed::Error> for CliError {
    fn from(e: xlembed::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data | ErrorKind::Contract => 3,
            ErrorKind::Numeric => 4,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "xlembed", version, about = "Cross-lingual sentence embeddings with LoRA contrastive fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON or `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Group labeled NLI pairs into triplets.
    Triplets {
        /// Pair file (`premise TAB hypothesis TAB label [TAB lang]`) or a headered NLI release.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "pairs")]
        format: PairFormat,
        /// Language for rows without one.
        #[arg(long, default_value = "und")]
        lang: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an untrained checkpoint.
    Init {
        #[command(flatten)]
        common: Common,
        /// Triplet files whose words form the vocabulary.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Vocabulary file, one token per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Leave the model without adapters.
        #[arg(long)]
        no_adapters: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune adapters on triplet files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Triplet TSV files. With cross-lingual sampling, one line-aligned file per language.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// STS file for model selection.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Train once per candidate learning rate and keep the best on --dev.
        #[arg(long)]
        lr_sweep: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed one sentence per line.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Language tag stored with every row.
        #[arg(long, default_value = "und")]
        lang: String,
        /// Store single-precision values.
        #[arg(long)]
        f32: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score embedding files.
    Eval {
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Two embedding files.
        #[arg(long, num_args = 2, required = true)]
        data: Vec<PathBuf>,
        /// Gold scores (sts) or gold pairs (mine).
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Fixed mining threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Dev embeddings and gold pairs for tuning the mining threshold.
        #[arg(long, num_args = 3, value_names = ["SRC", "TGT", "GOLD"])]
        tune_on: Option<Vec<PathBuf>>,
        /// Allow several pairs per sentence when mining.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every preset with every seed.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "small,medium,large")]
        presets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalTask {
    Retrieval,
    Sts,
    Mine,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum PairFormat {
    Pairs,
    Nli,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env = || std::env::vars().collect::<Vec<_>>();
    let load = |c: &Common| -> Result<config::RunConfig, CliError> {
        let cfg = config::load(c.config.as_deref(), env())?;
        Ok(match c.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    };
    match cli.command {
        Command::GenCorpus { common, out } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.corpus.seed = s;
            }
            commands::gen_corpus(&cfg, common.config.as_deref(), &out)
        }
        Command::Triplets { data, format, lang, out } => commands::triplets(&data, matches!(format, PairFormat::Nli), &lang, &out),
        Command::Init {
            common,
            data,
            vocab,
            no_adapters,
            out,
        } => commands::init(&load(&common)?, common.config.as_deref(), &data, vocab.as_deref(), !no_adapters, &out),
        Command::Train {
            common,
            data,
            vocab,
            dev,
            lr_sweep,
            out,
        } => commands::train(&load(&common)?, common.config.as_deref(), &data, vocab.as_deref(), dev.as_deref(), lr_sweep, &out),
        Command::Embed {
            checkpoint,
            data,
            lang,
            f32,
            out,
        } => commands::embed(&checkpoint, &data, &lang, f32, &out),
        Command::Eval {
            task,
            data,
            gold,
            threshold,
            tune_on,
            strict,
            out,
        } => {
            let args = commands::EvalArgs {
                task: match task {
                    EvalTask::Retrieval => xlembed::eval::Task::Retrieval,
                    EvalTask::Sts => xlembed::eval::Task::Sts,
                    EvalTask::Mine => xlembed::eval::Task::Mining,
                },
                data: &data,
                gold: gold.as_deref(),
                threshold,
                tune_on: tune_on.as_deref(),
                strict,
            };
            commands::eval(&args, &out)
        }
        Command::Scaling { common, presets, seeds, out } => {
            let presets = presets
                .iter()
                .map(|p| p.parse::<xlembed::encoder::Preset>())
                .collect::<Result<Vec<_>, _>>()?;
            commands::scaling(&load(&common)?, common.config.as_deref(), &presets, &seeds, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
