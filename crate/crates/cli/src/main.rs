mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vidrefine", version, about = "Refine per-frame grid detections with a recurrent network")]
struct Cli {
    /// TOML settings file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of corrupted pseudo-label sequences.
    Synth(SynthArgs),
    /// Train a refiner on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and print the AP table.
    Eval(EvalArgs),
    /// Write refined per-frame detections for one sequence.
    Infer(InferArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Prefix of generated sequence ids.
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    /// Classes that may appear, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub active: Option<Vec<usize>>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub max_speed: Option<f64>,
    #[arg(long)]
    pub jitter_std: Option<f64>,
    #[arg(long)]
    pub min_size: Option<f64>,
    #[arg(long)]
    pub max_size: Option<f64>,
    #[arg(long)]
    pub class_flip_prob: Option<f64>,
    #[arg(long)]
    pub miss_prob: Option<f64>,
    #[arg(long)]
    pub miss_residual: Option<f64>,
    #[arg(long)]
    pub conf_noise_std: Option<f64>,
    #[arg(long)]
    pub loc_jitter_std: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_coord: Option<f64>,
    #[arg(long)]
    pub lambda_noobj: Option<f64>,
    #[arg(long)]
    pub detect_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History log; one record per epoch. Defaults to stderr.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh network.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Held-out dataset scored every `--eval-every` epochs.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Hidden sizes per layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// `sigmoid` or `tanh`.
    #[arg(long)]
    pub candidate: Option<String>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit `key=value` records instead of the text table.
    #[arg(long)]
    pub records: bool,
    /// Score the raw pseudo-labels as well.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub detect_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sequence id; defaults to the first sequence.
    #[arg(long, conflicts_with = "index")]
    pub sequence: Option<String>,
    /// Sequence position in the file.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub detect_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::FileConfig::load(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::Synth(a) => commands::synth(&a, &file),
        Command::Train(a) => commands::train(&a, &file),
        Command::Eval(a) => commands::eval(&a, &file),
        Command::Infer(a) => commands::infer(&a, &file),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: kind={} msg={}", commands::error_kind(&e), msg);
            ExitCode::FAILURE
        }
    }
}
