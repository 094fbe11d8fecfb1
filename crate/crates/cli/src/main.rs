use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Box-based next-item recommendation: data preparation, training,
/// evaluation and inspection.
#[derive(Debug, Parser)]
#[command(name = "boxrec", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and split an interaction log into a dataset bundle.
    Prepare(PrepareArgs),
    /// Train a model on a bundle.
    Train(TrainArgs),
    /// Rank all unrated items for every test user and report metrics.
    Evaluate(EvaluateArgs),
    /// Top-k items for one user.
    Recommend(RecommendArgs),
    /// Write item embeddings or user boxes as a text matrix.
    Export(ExportArgs),
    /// Finite-difference check of every op and of the training loss.
    GradCheck(GradCheckArgs),
    /// Generate a synthetic box world and its bundle.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Log format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<String>,
    /// Keep only rows with rating at least this value.
    #[arg(long)]
    rating_threshold: Option<f64>,
    /// Users with fewer interactions are dropped (repeatedly, with items).
    #[arg(long, default_value_t = boxrec::datasets::MIN_USER_ACTIVITY)]
    min_user_activity: usize,
    /// Items with fewer interactions are dropped.
    #[arg(long, default_value_t = boxrec::datasets::MIN_ITEM_ACTIVITY)]
    min_item_activity: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat key=value file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    boxes: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    pooling: Option<String>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20, 30, 50])]
    ks: Vec<usize>,
    /// Score with every offset forced to zero.
    #[arg(long)]
    point_baseline: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Seed recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// External user id.
    #[arg(long)]
    user: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportWhat {
    Items,
    Boxes,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    what: ExportWhat,
    /// Bundle whose users' boxes are exported (required for boxes).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Project onto the top D principal components of the item embeddings.
    #[arg(long)]
    pca: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dims {
    Toy,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = Dims::Toy)]
    dims: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Inject a deliberate backward bug; the check must then fail.
    #[arg(long = "break")]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    d0: usize,
    #[arg(long, default_value_t = 1)]
    boxes_per_user: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    switch_prob: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
