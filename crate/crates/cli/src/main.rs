//! `dseg`: synthetic data, splits, training, evaluation, inference,
//! heatmaps, profiling and gradient checks from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dilated_seg::Error;

#[derive(Parser, Debug)]
#[command(name = "dseg", version, about = "Dilated-convolution polyp segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image/mask dataset.
    SynthData(SynthArgs),
    /// Partition a manifest into train/val/test id lists.
    Split(SplitArgs),
    /// Train a model and write checkpoint, history and resolved settings.
    Train(TrainArgs),
    /// Score a trained model on a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Predict a binary mask for one image.
    Infer(InferArgs),
    /// Write bottleneck heatmap and overlay images for one image.
    Heatmap(HeatmapArgs),
    /// Print parameter count, GMac and throughput for a configuration.
    Profile(ProfileArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `key = value` file; see `resolved.cfg` of a previous run for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// HxW.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("spec").required(true).args(["ratios", "preset"]))]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `train:val:test`, e.g. 80:10:10.
    #[arg(long)]
    ratios: Option<String>,
    /// Named split (kvasir: 880/60/rest).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory for train.txt, val.txt and test.txt; defaults to the manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// HxW input size the model runs at.
    #[arg(long)]
    size: Option<String>,
    /// Replace the DCP blocks by plain pooled convolutions.
    #[arg(long)]
    no_dcp: bool,
    /// Drop the attention modules from the decoder.
    #[arg(long)]
    no_cbam: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with images/, masks/ and manifest.txt (or train.txt and val.txt).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// on or off.
    #[arg(long)]
    augment: Option<String>,
    /// Ratio string or named split, used when the data directory has no train.txt.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Model settings; defaults to `resolved.cfg` beside the weights when present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    weights: WeightsArgs,
    #[arg(long)]
    data: PathBuf,
    /// Id list inside the data directory; defaults to test.txt, then manifest.txt.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output path; `.md` selects markdown, anything else CSV.
    #[arg(long)]
    report: PathBuf,
    /// foreground or with-background.
    #[arg(long, default_value = "foreground")]
    iou: String,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    weights: WeightsArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask_out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    weights: WeightsArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// HxW input for MAC counting and timing.
    #[arg(long, default_value = "256x256")]
    input: String,
    /// Timed forward passes per repetition.
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Report parameters and MACs only.
    #[arg(long)]
    no_fps: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Also check the full desk network.
    #[arg(long)]
    full: bool,
}

/// Failure classes with their exit codes.
enum Failure {
    Usage(String),
    Runtime(Error),
    /// A check that ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::KeyValue { .. } | Error::UnknownFormat(_) | Error::Split(_) => {
                Failure::Usage(format!("[{}] {e}", e.kind()))
            }
            e => Failure::Runtime(e),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("dseg: error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("dseg: error[usage]: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("dseg: error[check]: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("dseg: error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(2)
        }
    }
}
