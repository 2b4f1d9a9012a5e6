//! `cer`: data preparation, training, evaluation, ensembling and per-frame
//! prediction for compound expression recognition.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cer", version, about = "Compound facial expression recognition toolkit")]
struct Cli {
    /// Seed for every random choice; overrides the config file seed.
    #[arg(long, global = true, env = "CER_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic 7-class image fixture, its manifest and a config.
    Synth(SynthArgs),
    /// Merge source manifests into one canonical manifest and assign splits.
    PrepareData(PrepareArgs),
    /// Train a fusion model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the per-class table.
    Eval(EvalArgs),
    /// Evaluate several members and their late fusion side by side.
    EnsembleEval(EnsembleEvalArgs),
    /// Write per-item predictions for a frame directory or a manifest.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub val_per_class: usize,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Input manifest; repeat for several sources.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// `SOURCE=PATH` schema file mapping a source's ids to class names.
    #[arg(long = "schema")]
    pub schemas: Vec<String>,
    /// Fraction of split-less records sent to validation.
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
    /// Write `last.ckpt` every N epochs.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only records of this split (train, val, test).
    #[arg(long)]
    pub split: Option<String>,
    /// Encoder list overriding the checkpoint's, e.g. to point at other caches.
    #[arg(long)]
    pub encoders: Option<String>,
    /// Column title; defaults to the checkpoint file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Also write a tab-separated report here.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleEvalArgs {
    /// Checkpoint or prediction file (`.csv`); repeat for each member.
    #[arg(long = "member", required = true)]
    pub members: Vec<PathBuf>,
    /// Comma-separated member weights; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub encoders: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint; repeat to predict with a weighted ensemble.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Directory of frames, one subdirectory per video.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub encoders: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, seed),
        Command::PrepareData(a) => commands::prepare_data(&a, seed),
        Command::Train(a) => commands::train(&a, seed),
        Command::Eval(a) => commands::eval(&a),
        Command::EnsembleEval(a) => commands::ensemble_eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
