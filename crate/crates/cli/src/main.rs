mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Stance detection benchmark: data preparation, training, voting and evaluation.
#[derive(Parser, Debug)]
#[command(name = "stance", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Restrict to a topic; repeatable.
    #[arg(long = "topic", global = true, value_name = "NAME")]
    pub topics: Vec<String>,
    /// Restrict to a model; repeatable. Evaluation commands also accept external model names.
    #[arg(long = "model", global = true, value_name = "NAME")]
    pub models: Vec<String>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Add the published reference rows to comparison tables.
    #[arg(long, global = true)]
    pub reference_rows: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load and validate the dataset, writing one normalized JSON file per topic.
    Ingest,
    /// Per-topic class counts of the train and test splits.
    Stats,
    /// Write the token sequences of both preprocessing modes.
    Preprocess,
    /// Train the selected models and write their artifacts.
    Train,
    /// Write test-set predictions from trained artifacts.
    Predict,
    /// Score stored predictions.
    Evaluate,
    /// Comparison table of the official metric across models and topics.
    Compare,
    /// Posts that every selected model gets wrong.
    ErrorAnalysis,
    /// Finite-difference gradient checks of every primitive and model graph.
    GradCheck,
    /// Randomized check that TAN attention ignores the target and matches TAN-.
    TheoremCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        posts: usize,
    },
    /// Import test-set predictions produced elsewhere (`post_id<TAB>label`).
    ImportExternal {
        /// A predictions file (with one --topic) or a directory of `<TOPIC>.tsv` files.
        path: PathBuf,
    },
    /// Cross-validated grid search on the training split.
    Tune,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
