//! `mde`: train, complete, resample, evaluate, mask statistics and gradient
//! verification. Every command resolves its settings (config file, then
//! flags, then defaults), writes a run manifest, and only then computes.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod data;
pub mod diag;
pub mod eval;
pub mod infer;
pub mod settings;
pub mod train;

use settings::Settings;

/// Bad flags, unknown settings or malformed values (exit code 1).
#[derive(Debug, Clone)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verification command found failures (exit code 3).
#[derive(Debug, Clone)]
pub struct VerificationFailed(pub Vec<String>);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerificationFailed {}

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

/// 1 for usage and configuration errors, 3 for verification failures, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_VERIFY;
    }
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<mde_core::Error>() {
        Some(mde_core::Error::Config(_) | mde_core::Error::Parameter(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mde", version, about = "Missing-data encoders: channel-wise masked image completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator and discriminator; writes checkpoints, a CSV log and sample grids.
    Train(TrainArgs),
    /// Complete masked versions of input images with a trained generator.
    Complete(CompleteArgs),
    /// Repeatedly re-mask and re-complete one image.
    Resample(ResampleArgs),
    /// Evaluate checkpoints under the task-matrix or occlusion protocol.
    Eval(EvalArgs),
    /// Empirical dropped and corrupted pixel fractions of a mask family.
    MaskStats(MaskStatsArgs),
    /// Finite-difference check of every primitive and loss in 64-bit precision.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Settings file of `key = value` lines; a run manifest works too.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any setting, e.g. `--set lr_gen=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        s.set_opt("out", self.out.as_ref().map(|p| p.display().to_string()));
        Ok(s)
    }

    fn finish(&self, mut s: Settings) -> Result<Settings> {
        s.apply_overrides(&self.set)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Masking task: i, ri, col, col1, col2, re or rec.
    #[arg(long)]
    pub task: Option<String>,
    /// Masking ratio S (visible fraction of each channel).
    #[arg(long = "s")]
    pub ratio: Option<f64>,
    /// Visible channels for colorization.
    #[arg(long = "k")]
    pub col_visible: Option<u8>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hide-and-seek game: on or off.
    #[arg(long)]
    pub hns: Option<String>,
    /// synthetic:<blobs|stripes|gradients>, idx:<file>, manifest:<file>, or a PNG directory.
    #[arg(long)]
    pub data: Option<String>,
    /// Number of training images.
    #[arg(long = "n")]
    pub data_n: Option<usize>,
    /// Resume from a checkpoint written with the same settings.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write a completion grid every this many steps (0: only at the end).
    #[arg(long)]
    pub grid_every: Option<usize>,
    /// What to do with images of the wrong size: fail or resize.
    #[arg(long)]
    pub size_mismatch: Option<String>,
}

impl TrainArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        s.set_opt("task", self.task.as_ref());
        s.set_opt("ratio", self.ratio);
        s.set_opt("col_visible", self.col_visible);
        s.set_opt("steps", self.steps);
        s.set_opt("seed", self.seed);
        s.set_opt("batch_size", self.batch_size);
        s.set_opt("hns", self.hns.as_ref());
        s.set_opt("data", self.data.as_ref());
        s.set_opt("data_n", self.data_n);
        s.set_opt("resume", self.resume.as_ref().map(|p| p.display().to_string()));
        s.set_opt("grid_every", self.grid_every);
        s.set_opt("size_mismatch", self.size_mismatch.as_ref());
        self.common.finish(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompleteArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A PNG file, a PNG directory, manifest:<file> or synthetic:<kind>.
    #[arg(long)]
    pub input: Option<String>,
    /// Number of images to take from the input.
    #[arg(long = "n")]
    pub n: Option<usize>,
    /// Masking task; defaults to the checkpoint's.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long = "s")]
    pub ratio: Option<f64>,
    #[arg(long = "k")]
    pub col_visible: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independently masked completions per input.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub size_mismatch: Option<String>,
}

impl CompleteArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        s.set_opt("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        s.set_opt("input", self.input.as_ref());
        s.set_opt("n", self.n);
        s.set_opt("task", self.task.as_ref());
        s.set_opt("ratio", self.ratio);
        s.set_opt("col_visible", self.col_visible);
        s.set_opt("seed", self.seed);
        s.set_opt("samples", self.samples);
        s.set_opt("size_mismatch", self.size_mismatch.as_ref());
        self.common.finish(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ResampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<String>,
    /// Which image of the input to use.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long = "s")]
    pub ratio: Option<f64>,
    #[arg(long = "k")]
    pub col_visible: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of mask-and-complete rounds.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub size_mismatch: Option<String>,
}

impl ResampleArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        s.set_opt("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        s.set_opt("input", self.input.as_ref());
        s.set_opt("index", self.index);
        s.set_opt("task", self.task.as_ref());
        s.set_opt("ratio", self.ratio);
        s.set_opt("col_visible", self.col_visible);
        s.set_opt("seed", self.seed);
        s.set_opt("steps", self.steps);
        s.set_opt("size_mismatch", self.size_mismatch.as_ref());
        self.common.finish(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// task-matrix or occlusions.
    pub protocol: Option<String>,
    /// Checkpoint path; task-matrix accepts a comma-separated list.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long = "s")]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size_mismatch: Option<String>,
}

impl EvalArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        s.set_opt("protocol", self.protocol.as_ref());
        s.set_opt("checkpoint", self.checkpoint.as_ref());
        s.set_opt("data", self.data.as_ref());
        s.set_opt("n", self.n);
        s.set_opt("ratio", self.ratio);
        s.set_opt("seed", self.seed);
        s.set_opt("size_mismatch", self.size_mismatch.as_ref());
        self.common.finish(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct MaskStatsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long = "s")]
    pub ratio: Option<f64>,
    #[arg(long = "k")]
    pub col_visible: Option<u8>,
    /// Square image side.
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of masks.
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl MaskStatsArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        s.set_opt("task", self.task.as_ref());
        s.set_opt("ratio", self.ratio);
        s.set_opt("col_visible", self.col_visible);
        s.set_opt("size", self.size);
        s.set_opt("n", self.n);
        s.set_opt("seed", self.seed);
        self.common.finish(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Maximum relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Finite-difference half step.
    #[arg(long)]
    pub step: Option<f64>,
}

impl GradCheckArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = self.common.settings()?;
        s.set_opt("tolerance", self.tolerance);
        s.set_opt("step", self.step);
        self.common.finish(s)
    }
}

/// Runs one parsed command, printing its report to stdout.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let o = train::train(&a.settings()?)?;
            println!(
                "trained {} steps; checkpoint {}; log {}",
                o.steps_run,
                o.checkpoint.display(),
                o.csv.display()
            );
        }
        Command::Complete(a) => {
            let o = infer::complete(&a.settings()?)?;
            println!("{}", o.summary());
        }
        Command::Resample(a) => {
            let o = infer::resample(&a.settings()?)?;
            println!("{} images written to {}", o.frames.len(), o.grid.display());
        }
        Command::Eval(a) => {
            let o = eval::eval(&a.settings()?)?;
            print!("{}", o.table);
            println!("CSV report: {}", o.csv_path.display());
        }
        Command::MaskStats(a) => {
            let o = diag::mask_stats(&a.settings()?)?;
            print!("{}", o.report());
        }
        Command::GradCheck(a) => {
            diag::grad_check(&a.settings()?, true)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
