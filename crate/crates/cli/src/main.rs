//! `dime`: synthetic data generation, training, evaluation, gradient checks
//! and single-record prediction.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dime_core::DimeError;

#[derive(Debug, Parser)]
#[command(name = "dime", version, about = "Disentangled multi-expert stance detection over embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic embedding dataset.
    GenSynth(GenSynthArgs),
    /// Split a dataset, train, and write checkpoint, history and reports.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small random model.
    Gradcheck(GradcheckArgs),
    /// Print the stance and gate weights for one record.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value = "text_dominant")]
    mode: String,
    /// Comma-separated target names.
    #[arg(long, value_delimiter = ',', default_value = "A,B")]
    targets: Vec<String>,
    /// Records per class per target.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 768)]
    d_text: usize,
    #[arg(long, default_value_t = 512)]
    d_visual: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output file; defaults to `synthetic.jsonl` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DIME_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    InTarget,
    ZeroShot,
    /// Every record, no split (eval only).
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartArg {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "DIME_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Comma-separated held-out targets for the zero-shot split.
    #[arg(long, value_delimiter = ',')]
    hold_out: Option<Vec<String>>,
    /// Seed for the split, training and initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    no_clip: bool,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    d_common: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_ffn: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gate_hidden: Option<usize>,
    /// Remove the alignment expert and its loss.
    #[arg(long)]
    ablate_alignment: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the split stored in the checkpoint.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, value_delimiter = ',')]
    hold_out: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    part: PartArg,
    #[arg(long, env = "DIME_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    d_common: usize,
    #[arg(long, default_value_t = 6)]
    d_text: usize,
    #[arg(long, default_value_t = 5)]
    d_visual: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ablate_alignment: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Record id; defaults to the first record.
    #[arg(long)]
    id: Option<String>,
}

/// Maps an error chain to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DimeError>() {
            return match e {
                DimeError::Usage(_) | DimeError::Parameter(_) => 1,
                DimeError::NonFinite { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<commands::NumericFailure>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(*a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Predict(a) => commands::predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
