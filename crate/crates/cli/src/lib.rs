//! `soilseg` command line: dataset checks and splitting, training, evaluation, segmentation,
//! benchmarking and curve plotting.
//!
//! Exit codes are shared by every subcommand: 0 success, 1 processing failure, 2 environment or
//! IO failure, 64 usage error.

mod commands;
pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_ENV: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Reference latency from the original GPU setup, printed next to local timings.
pub const REFERENCE_LATENCY_SECONDS: f64 = 0.06;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Env(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Env(_) => EXIT_ENV,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Env(m) | CliError::Failure(m) => m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "soilseg", version, about = "Soil instance segmentation with Mask R-CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a COCO2017-layout dataset root; prints one violation per line.
    Validate(ValidateArgs),
    /// Split a flat annotated pool into train2017/val2017.
    Split(SplitArgs),
    /// Train Mask R-CNN on a dataset root.
    Train(TrainArgs),
    /// Report segmentation mAP@0.5 for a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Whiten the background and crop the soil region of one image or a directory of images.
    Segment(SegmentArgs),
    /// Time single-image inference plus post-processing.
    Bench(BenchArgs),
    /// Draw loss, learning-rate and mAP curves from a training CSV.
    Plot(PlotArgs),
    /// Write a synthetic dataset in the COCO2017 layout.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DeviceArg {
    /// cpu, cuda[:N] or metal; only cpu is compiled into this build.
    #[arg(long, env = "SOILSEG_DEVICE", default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Also write the manifest and a JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Directory holding the images and one COCO annotation file.
    #[arg(long)]
    pub input: PathBuf,
    /// Annotation file; defaults to the only .json file in --input.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7, value_parser = parse_ratio)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated epochs at which the learning rate is multiplied by --decay-factor.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mixed_precision: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hflip_prob: Option<f64>,
    /// Skip the per-epoch validation pass.
    #[arg(long)]
    pub no_eval: bool,
    /// resnet50-fpn or compact-fpn.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Torchvision-named safetensors weights for the ResNet-50 body.
    #[arg(long)]
    pub backbone_weights: Option<PathBuf>,
    /// Train the backbone from scratch.
    #[arg(long)]
    pub no_pretrained: bool,
    /// Complete model configuration as JSON; backbone flags still apply on top.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false, args = ["checkpoint", "predictions"])]
pub struct EvalArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// COCO results JSON: [{"image_id", "score", "segmentation": [[x, y, ...]]}].
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_unit)]
    pub mask_threshold: Option<f64>,
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub iou_threshold: f64,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of .png/.jpg images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub score_threshold: f64,
    #[arg(long, value_parser = parse_unit)]
    pub mask_threshold: Option<f64>,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    #[arg(long, default_value_t = 3)]
    pub warmup: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub score_threshold: f64,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// train_log.csv written by `soilseg train`.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training images; the val split gets 3/7 as many unless --n-val is given.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub size: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("ratio must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("expected a value in [0, 1], got {v}"))
    }
}

/// Parses `args` (program name first) and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Validate(a) => commands::validate(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Segment(a) => commands::segment(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Plot(a) => plot::cmd_plot(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

/// Resolves a device name. Only the CPU backend is compiled in, so accelerator requests fail
/// as environment errors.
pub fn select_device(name: &str) -> Result<candle_core::Device, CliError> {
    let name = name.trim().to_ascii_lowercase();
    if name == "cpu" {
        return Ok(candle_core::Device::Cpu);
    }
    let ordinal = |rest: &str| -> Result<usize, CliError> {
        match rest {
            "" => Ok(0),
            r => r
                .strip_prefix(':')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| CliError::Usage(format!("bad device '{name}'"))),
        }
    };
    let dev = if let Some(rest) = name.strip_prefix("cuda") {
        candle_core::Device::new_cuda(ordinal(rest)?)
    } else if let Some(rest) = name.strip_prefix("metal") {
        candle_core::Device::new_metal(ordinal(rest)?)
    } else {
        return Err(CliError::Usage(format!(
            "unknown device '{name}' (expected cpu, cuda[:N] or metal)"
        )));
    };
    dev.map_err(|e| CliError::Env(format!("device {name} unavailable: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run(["soilseg"]), EXIT_USAGE);
        assert_eq!(run(["soilseg", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["soilseg", "split", "--input", "x", "--out", "y", "--ratio", "1.5"]), EXIT_USAGE);
        assert_eq!(run(["soilseg", "eval", "--root", "r", "--out", "o"]), EXIT_USAGE);
        assert_eq!(run(["soilseg", "bench", "--checkpoint", "c", "--image", "i", "--out", "o", "--runs", "0"]), EXIT_USAGE);
        assert_eq!(run(["soilseg", "--help"]), EXIT_OK);
    }

    #[test]
    fn devices() {
        assert!(matches!(select_device("cpu"), Ok(candle_core::Device::Cpu)));
        assert!(matches!(select_device("CPU"), Ok(candle_core::Device::Cpu)));
        assert!(matches!(select_device("tpu"), Err(CliError::Usage(_))));
        assert!(matches!(select_device("cuda:x"), Err(CliError::Usage(_))));
        assert!(matches!(select_device("cuda:0"), Err(CliError::Env(_))));
    }
}
