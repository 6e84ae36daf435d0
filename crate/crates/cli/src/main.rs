//! `voxattn`: every pipeline stage from raw manifests to trajectory plots.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or contamination
//! error, 3 I/O error.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxattn::labeling::LabelingScheme;
use voxattn::model::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "voxattn", version, about = "Preclinical AD detection from volumetric scans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a manifest and every volume it references; write a canonical copy.
    Ingest(IngestArgs),
    /// Label every scan session from its clinical timeline.
    Label(LabelArgs),
    /// Person-disjoint train/val/test split.
    Split(SplitArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a held-out split.
    Evaluate(EvaluateArgs),
    /// Probabilities for individual volumes (and glimpse paths for the RVN).
    Predict(PredictArgs),
    /// Plot a glimpse trajectory over slices of its volume.
    Trajectory(TrajectoryArgs),
    /// Generate a synthetic longitudinal cohort with planted lesions.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// A drops scans already matched to AD dementia; B keeps them as class 0.
    #[arg(long, default_value = "A")]
    pub scheme: LabelingScheme,
    /// Write labels.jsonl and label_summary.json here instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_parser = parse_ratios, default_value = "0.65,0.20,0.15")]
    pub ratios: [f64; 3],
    #[arg(long)]
    pub seed: u64,
    /// Write split.json here instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split map from `split`.
    #[arg(long)]
    pub split: PathBuf,
    /// Training config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// `full` (full-size), `desk` (small volumes) or a model-config JSON file.
    #[arg(long, default_value = "full")]
    pub arch: String,
    /// Initialize the transformer backbone from this transformer checkpoint.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub scheme: Option<LabelingScheme>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test", value_parser = ["val", "test"])]
    pub subset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Volume paths (sidecar or raw file, with or without extension).
    #[arg(long = "volume", required = true)]
    pub volumes: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrajectoryArgs {
    /// Trajectory JSON written by `predict`.
    #[arg(long)]
    pub input: PathBuf,
    /// Volume to draw underneath; blank panels without it.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Cohort spec JSON; defaults are used for missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| format!("expected three comma-separated ratios, got {}", p.len()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
