//! `dhc`: every pipeline stage as a subcommand.
//!
//! All commands are deterministic for a fixed `--seed` and configuration.
//! Configuration files are flat `key = value` text; command-line flags win.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dhc", version, about = "Quasi-invariant image decomposition with confidence maps")]
pub struct Cli {
    /// Seed for every random choice (training, synthesis, encoder kernels unless configured).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate the per-channel and intensity noise sigmas of an image.
    EstimateNoise {
        image: PathBuf,
        /// Write the model here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Apply one operator and write its transform (and optionally distances).
    Transform {
        #[command(subcommand)]
        op: TransformOp,
    },
    /// Turn a distance map into a confidence map.
    Confidence(ConfidenceArgs),
    /// Run noise, illumination, operators and confidence for one image.
    Pipeline(PipelineArgs),
    /// Render synthetic scenes with ground-truth masks.
    Synth {
        /// Scene description (flat key=value).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Calibration and limited-sample evaluations.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Train the linear head on encoded features of a manifest.
    Train(TrainArgs),
    /// Classify one image with a trained model.
    Classify {
        /// Model written by `train`.
        #[arg(long)]
        model: PathBuf,
        image: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct NoiseSource {
    /// Noise model file, or `auto` to estimate from the image.
    #[arg(long, default_value = "auto")]
    pub noise: String,
}

#[derive(Subcommand, Debug)]
pub enum TransformOp {
    /// Normalized rg chromaticity plus squared distance (channels r, g, d2).
    Rg {
        image: PathBuf,
        #[command(flatten)]
        noise: NoiseSource,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the squared Mahalanobis distance alone.
        #[arg(long)]
        d2: Option<PathBuf>,
        /// Apply gray-point correction first.
        #[arg(long, value_enum)]
        illumination: Option<Toggle>,
    },
    /// Multi-scale LBP: one code channel per scale (scaled to [0,1]), then one d2 channel per scale.
    Lbp {
        image: PathBuf,
        #[command(flatten)]
        noise: NoiseSource,
        /// Comma-separated `radius:points` list.
        #[arg(long)]
        scales: Option<String>,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the per-scale squared Mahalanobis distances alone.
        #[arg(long)]
        d2: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Args, Debug)]
pub struct ConfidenceArgs {
    pub d2: PathBuf,
    /// Degrees of freedom; one value, or one per channel.
    #[arg(long)]
    pub k: String,
    /// Prior of the null hypothesis; one value, or one per channel.
    #[arg(long)]
    pub prior: String,
    /// Split list, e.g. `0,100,1000,auto`.
    #[arg(long)]
    pub splits: Option<String>,
    /// Median source for `auto`: `d2` or `d`.
    #[arg(long)]
    pub median: Option<String>,
    /// Validity mask (nonzero = valid), same size; all pixels valid if absent.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    pub image: PathBuf,
    /// Comma-separated streams: `rg`, `lbp`, `raw`.
    #[arg(long)]
    pub streams: Option<String>,
    /// Comma-separated LBP `radius:points` list.
    #[arg(long)]
    pub scales: Option<String>,
    /// Split list, e.g. `0,100,1000,auto`.
    #[arg(long)]
    pub splits: Option<String>,
    /// Gray-point correction before the rg operator.
    #[arg(long, value_enum)]
    pub illumination: Option<Toggle>,
    /// Noise model file instead of estimating.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Also write the encoded feature vector as `features.txt`.
    #[arg(long)]
    pub features: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Confidence calibration against ground truth, on a fixture or given maps.
    Calibration {
        /// `red-circle` or `gray`; ignored when `--conf` is given.
        #[arg(long, default_value = "red-circle")]
        fixture: String,
        /// Noise sigma of the rendered fixture.
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
        /// Single-channel confidence map.
        #[arg(long, requires = "truth")]
        conf: Option<PathBuf>,
        /// Null-hypothesis mask (nonzero = null).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Pixels to score (nonzero = include).
        #[arg(long)]
        include: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Accuracy versus training-set size for each stream arm.
    LimitedSamples {
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TSV of `path<TAB>label`, paths relative to the manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated streams: `rg`, `lbp`, `raw`.
    #[arg(long)]
    pub streams: Option<String>,
    /// Weight the encoder by confidence maps.
    #[arg(long, value_enum)]
    pub conf: Option<Toggle>,
    /// Use at most this many images per class, in manifest order.
    #[arg(long)]
    pub limit_per_class: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
