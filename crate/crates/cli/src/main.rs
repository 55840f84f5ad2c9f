use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Exit codes.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Error raised for bad invocations that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "trajkit", version = manifest::VERSION, about = "Trajectory prediction with ensemble uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate scenes and write a dataset file.
    GenerateData(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Predict candidate trajectories with one model or a RIP ensemble.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Write error-retention curves.
    Retention(EvaluateArgs),
    /// Train and score every configuration in a grid.
    Ablate(AblateArgs),
    /// Rerun a command from its manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Flat key = value file with scene and raster settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// in | shifted
    #[arg(long, default_value = "in")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key = value file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the log is written to `<out>.log.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional held-out dataset scored every `eval_every` steps.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Batch 512, 128 px rasters, base width 16.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Comma-separated checkpoint paths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Sampled trajectories per model (ensembles only).
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// max (worst-case planning) | min
    #[arg(long, default_value = "max")]
    pub rule: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// ade | fde | cnll, comma-separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub metric: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub grid: PathBuf,
    /// Comma-separated dataset files, concatenated; together they must hold
    /// in-domain and shifted samples.
    #[arg(long, value_delimiter = ',', required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Base model and training settings shared by every grid line.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trailing in-domain samples held out for scoring.
    #[arg(long, default_value_t = 256)]
    pub holdout: usize,
    /// Shared seed for every configuration that does not set its own.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run(argv: Vec<String>) -> anyhow::Result<()> {
    let cli = Cli::parse_from(argv.iter().map(OsString::from));
    match cli.command {
        Command::GenerateData(a) => commands::generate(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Predict(a) => commands::predict(&a, &argv),
        Command::Evaluate(a) => commands::evaluate(&a, &argv),
        Command::Retention(a) => commands::retention(&a, &argv),
        Command::Ablate(a) => commands::ablate(&a, &argv),
        Command::Replay { manifest } => {
            let m = manifest::load(&manifest)?;
            if m.argv.get(1).map(String::as_str) == Some("replay") {
                return Err(UsageError("refusing to replay a replay manifest".into()).into());
            }
            log::info!("replaying {} from {}", m.subcommand, manifest.display());
            run(m.argv)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<trajkit::Error>() {
            return match e {
                trajkit::Error::Config(_) => EXIT_USAGE,
                trajkit::Error::NumericFault { .. } | trajkit::Error::Backward(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("TRAJKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("TRAJKIT_THREADS ignored: {e}");
        }
    }
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
