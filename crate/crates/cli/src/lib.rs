//! Command-line driver: dataset generation, training, lambda sweeps and
//! the verification suite. Every command writes a manifest under `--out`.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lht::model::TransitionInput;
use lht::verify::CheckName;
use lht::Mode;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "lht",
    version,
    about = "Hierarchical classification with label hierarchy transitions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical Gaussian-mixture dataset.
    GenData(GenDataArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Train over a grid of lambdas and seeds.
    SweepLambda(SweepArgs),
    /// Run the verification checks.
    Verify(VerifyArgs),
    /// Re-run the command recorded in a manifest into a new output directory.
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Hierarchy JSON file; overrides --levels.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Balanced hierarchy level sizes, finest first.
    #[arg(long, default_value = "8,4,2")]
    pub levels: String,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = lht::data::DEFAULT_NOISE_SIGMA)]
    pub sigma: f64,
    /// Center scales, coarsest first (default: powers of two).
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags shared by `train` and `sweep-lambda`. Unset flags fall
/// back to the config file, then to built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainFlags {
    /// Directory holding train.csv, test.csv and hierarchy.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// TOML file with training and model settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub lr_heads: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub transition_input: Option<TransitionInput>,
    /// Remove this level (2..K-1) before training.
    #[arg(long)]
    pub drop_level: Option<usize>,
    /// Replace the hierarchy with a random one drawn from this seed.
    #[arg(long)]
    pub random_hierarchy: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Lambda values, comma separated.
    #[arg(long, default_value = "0,0.5,1,2,5,10,100", allow_hyphen_values = true)]
    pub lambdas: String,
    /// Seeds, comma separated.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Run only these checks (grad, theorem1, lemma1, appendixA).
    #[arg(long)]
    pub only: Vec<CheckName>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional directory for the records and a manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => commands::cmd_gen_data(&a).map(|_| ()),
        Command::Train(a) => commands::cmd_train(&a).map(|_| ()),
        Command::SweepLambda(a) => commands::cmd_sweep_lambda(&a).map(|_| ()),
        Command::Verify(a) => commands::cmd_verify(&a).map(|_| ()),
        Command::Replay(a) => commands::cmd_replay(&a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
