//! `ctsan` command-line driver.

mod commands;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctsan::models::Task;
use ctsan::Precision;

#[derive(Parser, Debug)]
#[command(name = "ctsan", version, about = "Concept-tracing semantic attention networks", arg_required_else_help = true)]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample gradients.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` configuration override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Acc,
    Recall,
    Medr,
    Bleu,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from a spec file into --out.
    Gen,
    /// Train a task model on a dataset directory; writes the run into --out.
    Train {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the top-K concept words of every clip as JSON lines.
    Detect {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Words per clip; defaults to the model's K.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compute a metric from files or from a trained model.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        k: Option<usize>,
        /// BLEU order.
        #[arg(long)]
        n: Option<usize>,
        /// Similarity matrix (`.ctsn`) for recall and medr.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Predictions, one per line.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Gold labels, one per line.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Reference sentences, one per line; repeat for several references.
        #[arg(long = "refs")]
        refs: Vec<PathBuf>,
        /// Directory written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Average similarity matrices, or the outputs of several trained models.
    Ensemble {
        /// Similarity matrices to average.
        #[arg(long = "matrix")]
        matrices: Vec<PathBuf>,
        /// Trained model directories of one task.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference check of a task loss on the tiny configuration.
    Gradcheck {
        #[arg(long)]
        model: Task,
    },
    /// Score every caption of a split against every clip.
    Simmatrix {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Use only the first N clips of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
