//! Command-line driver: dataset synthesis, training, verification, explanation and the
//! hiding-game evaluation.
//!
//! Exit codes: 0 on success, 1 on runtime or check failure, 2 on usage or configuration
//! errors.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xfr_core::explain::{MaskingMode, Threshold};
use xfr_core::hiding::Method;

pub use config::RunConfig;

/// Bad invocation or configuration; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A self-check that ran to completion and did not hold; maps to exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

#[derive(Parser, Debug)]
#[command(name = "xfr", version, about = "Explainable face verification: train, verify, explain, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic face dataset
    Synth(SynthArgs),
    /// Sample balanced verification pairs from a dataset into a CSV
    Pairs(PairsArgs),
    /// Jointly train the recognition and reconstruction streams
    Train(TrainArgs),
    /// Score pairs and report verification accuracy
    Verify(VerifyArgs),
    /// Saliency maps explaining one pair
    Explain(ExplainArgs),
    /// Accuracy under progressive blurring of the least-salient pixels
    HidingGame(HidingArgs),
    /// Finite-difference check of every differentiable operator
    Gradcheck(GradcheckArgs),
    /// Decode an image from its own feature map
    Reconstruct(ReconstructArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 52)]
    pub identities: usize,
    #[arg(long, default_value_t = 16)]
    pub images_per_identity: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Put this many identities under `test/` and the rest under `train/`; 0 writes a
    /// single directory
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
}

#[derive(Args, Debug)]
pub struct PairsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root with one subdirectory per identity
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub img_a: PathBuf,
    #[arg(long)]
    pub img_b: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `auto` or a number
    #[arg(long)]
    pub threshold: Option<Threshold>,
    #[arg(long)]
    pub mode: Option<MaskingMode>,
}

#[derive(Args, Debug)]
pub struct HidingArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// One or more of ours, gradient, random (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "ours")]
    pub method: Vec<Method>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also evaluate the random baseline and fail unless every other method beats it
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<Threshold>,
    #[arg(long)]
    pub mode: Option<MaskingMode>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per operator
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add an operator with a deliberately wrong backward rule
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub img: PathBuf,
    /// Output PNG
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pairs(a) => commands::pairs(&a),
        Command::Train(a) => commands::train(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::HidingGame(a) => commands::hiding_game(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
    }
}
