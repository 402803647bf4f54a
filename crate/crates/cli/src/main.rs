mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "smallify",
    version,
    about = "Train networks that learn their own width, then fuse and benchmark them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write a checkpoint, record and size history.
    Train(TrainArgs),
    /// Random hyperparameter search with a size/accuracy Pareto table.
    Search(SearchArgs),
    /// Fold switches into their neighbours and write a binary model.
    Fuse(FuseArgs),
    /// Compare inference latency of two binary models.
    Bench(BenchArgs),
    /// Numerically check the four propositions about the switch objective.
    VerifyProps(VerifyArgs),
    /// Write a synthetic classification dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Input CSV: numeric feature columns plus one label column.
    #[arg(long)]
    pub data: PathBuf,
    /// Label column: `last`, a 0-based index, or a header name.
    #[arg(long, default_value = "last")]
    pub label: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// The first row holds data rather than column names.
    #[arg(long)]
    pub no_header: bool,
    /// Train/validation/test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15", value_delimiter = ',', num_args = 3)]
    pub split: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Architecture file (TOML, or JSON by extension).
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Full training config (TOML); flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub switch_momentum: Option<f64>,
    /// Sign-variance threshold; `inf` disables screening.
    #[arg(long)]
    pub switch_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Size-convergence window in epochs.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Search ranges (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Multiplier on hidden widths of the architecture.
    #[arg(long)]
    pub width_factor: Option<f64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Batch size for per-trial latency; 0 skips it.
    #[arg(long, default_value_t = 256)]
    pub latency_batch: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Store weights as f32.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long, default_value = "1,32,256", value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// `1`, `2`, `3`, `4` or `all`.
    #[arg(long, default_value = "all")]
    pub prop: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Synthetic dataset spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Search(a) => commands::search(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::VerifyProps(a) => commands::verify_props(&a),
        Command::GenData(a) => commands::gen_data(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = exit::categorize(&e);
            eprintln!("error[{}]: {e:#}", category.name());
            ExitCode::from(category.code())
        }
    }
}
