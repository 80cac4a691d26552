//! `gpuq` command-line pipeline.
//!
//! Exit codes: 0 success, 1 user or data error, 2 internal error.

mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gpuq::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gpuq", version, about = "Uncertainty-aware classification of dual-labelled text")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set learning_rate=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random choice; required here or as `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Gp,
    Ens,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dual-labelled corpus and a matching embedding table.
    ///
    /// Writes `corpus.csv` (id,text,primary_label,secondary_label) and
    /// `embeddings.txt` (`vocab dim` header, then `token v1 .. v_dim`).
    /// Config keys: num_examples, disagreement_rate, consistent_weights,
    /// inconsistent_weights, min_background, max_background, dim.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Embed a corpus CSV into a feature CSV and optionally split it.
    ///
    /// Feature CSV columns: id,label,secondary_label,f0..f{D-1}. With
    /// --split-dir, also writes train.csv, val.csv and test.csv in the same
    /// format. Config keys: val_fraction, test_fraction.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on a feature CSV (primary labels).
    ///
    /// Writes `model.json` and `trace.csv`. gp keys: num_inducing,
    /// learning_rate, epochs, batch_size, mc_train_samples,
    /// mc_predict_samples, optimize_inducing, rmsprop_decay, rmsprop_epsilon.
    /// ens keys: members, width, depth, learning_rate, epochs, batch_size,
    /// fgsm_epsilon, adam_beta1, adam_beta2, adam_epsilon.
    Train {
        /// Model family; may also come from the `model` config key.
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a model on NegINCONSTest, CheXINCONSTest and CONSTest.
    ///
    /// Writes `report.json`, `report.csv` (test_set,metric,value,count) and
    /// `reliability_constest.csv` (bin_low,bin_high,mean_predicted,
    /// fraction_positive,count; positive class on CONSTest).
    Evaluate {
        #[arg(long)]
        model_file: PathBuf,
        /// Test split feature CSV (both labels required).
        #[arg(long)]
        test: PathBuf,
        /// Validation split feature CSV, used by --calibrate.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Apply per-class isotonic calibration fitted on --val.
        #[arg(long, requires = "val")]
        calibrate: bool,
        /// Print empty FN/TP groups as 0 instead of leaving them blank.
        #[arg(long)]
        zero_empty_groups: bool,
        /// Monte-Carlo samples for GP predictions (default: 64).
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a reliability CSV as an SVG diagram.
    Report {
        #[arg(long)]
        reliability: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "Reliability (positive class)")]
        title: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out_dir, cfg } => commands::synth(&out_dir, &cfg),
        Command::Prepare { corpus, embeddings, out, split_dir, cfg } => {
            commands::prepare(&corpus, &embeddings, &out, split_dir.as_deref(), &cfg)
        }
        Command::Train { model, train, out_dir, cfg } => commands::train(model, &train, &out_dir, &cfg),
        Command::Evaluate { model_file, test, val, calibrate, zero_empty_groups, mc_samples, out_dir, cfg } => {
            let opts = commands::EvalOptions { calibrate, zero_empty_groups, mc_samples };
            commands::evaluate(&model_file, &test, val.as_deref(), &out_dir, &opts, &cfg)
        }
        Command::Report { reliability, out, title } => commands::report(&reliability, &out, &title),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let next = s.to_string();
                if !msg.contains(&next) {
                    msg.push_str(&format!(": {next}"));
                }
                source = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error; this is a bug");
            ExitCode::from(2)
        }
    }
}
