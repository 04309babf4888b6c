//! `cistree`: data preparation, training, tree learning, evaluation and
//! recommendation from one JSON experiment config.
//!
//! Any `--dotted.key=value` argument other than the named flags below
//! overrides the matching config key. Exit codes: 0 success, 2 config
//! error, 3 data error, 4 divergence.

mod artifacts;
mod config;
mod prep;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cistree::Error;

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "cistree", version, about = "Collaborative item selection experiments")]
struct Cli {
    /// Experiment config (JSON); every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split ratings into train/valid/test pairs and relevance labels.
    Prep,
    /// Train `model.kind` and write `<output_dir>/model.params`.
    Train,
    /// Learn a tree from a trained tree model's user factors, then finetune.
    LearnTree {
        #[arg(long)]
        model: PathBuf,
    },
    /// Score models on the test split under the configured protocols.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
    },
    /// Top-k unobserved items for one user.
    Recommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Audit prepared data and, optionally, model files.
    Validate {
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
}

const NAMED_FLAGS: [&str; 4] = ["config", "model", "user", "k"];

/// Splits `--key=value` config overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            Some((key, value)) if !NAMED_FLAGS.contains(&key) => overrides.push((key.to_string(), value.to_string())),
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Divergence { .. } => 4,
        Error::Parse { .. } | Error::Data(_) | Error::Format { .. } | Error::Lookup(_) | Error::Io(_) => 3,
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> cistree::Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Prep => {
            let manifest = prep::cmd_prep(&cfg)?;
            artifacts::progress(serde_json::json!({ "event": "done", "prep": manifest }));
        }
        Command::Train => {
            train::cmd_train(&cfg)?;
        }
        Command::LearnTree { model } => {
            train::cmd_learn_tree(&cfg, &model)?;
        }
        Command::Eval { models } => print!("{}", report::cmd_eval(&cfg, &models)?),
        Command::Recommend { model, user, k } => print!("{}", report::cmd_recommend(&cfg, &model, &user, k)?),
        Command::Validate { models } => {
            let audit = report::cmd_validate(&cfg, &models)?;
            for line in &audit.lines {
                println!("{line}");
            }
            if audit.failures > 0 {
                return Err(Error::Data(format!("{} validation checks failed", audit.failures)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
