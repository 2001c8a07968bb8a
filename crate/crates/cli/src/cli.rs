use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Intensity normalization and cross-contrast synthesis for brain MR images.
#[derive(Debug, Parser)]
#[command(name = "mrnorm", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Flags shared by every subcommand; each mirrors a config-file key.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML or JSON run configuration (chosen by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Normalizations, comma separated or repeated. `raw` is the baseline.
    #[arg(long, global = true)]
    pub method: Vec<String>,
    /// Source and target contrast, e.g. `t1:flair`. Repeatable.
    #[arg(long = "contrast-pair", global = true)]
    pub contrast_pair: Vec<String>,
    /// Synthesis models: `pr`, `rf`.
    #[arg(long, global = true)]
    pub model: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cohort manifest JSON.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Working directory for every output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Where FCM, GMM and KDE take the WM region from: `t1` or `self`.
    #[arg(long = "wm-from", global = true)]
    pub wm_from: Option<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Voxels sampled per training image for synthesis.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-contrast cohort and its manifest.
    Phantom(PhantomArgs),
    /// Fit normalizers on the training subjects.
    Fit,
    /// Normalize every subject with previously fitted models.
    Apply,
    /// Train synthesis models on normalized training images and predict the
    /// test subjects.
    Synth,
    /// Score predictions and write the quality report.
    Evaluate,
    /// Print a written quality report.
    Report,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Grid size, e.g. `64` or `48,48,40`.
    #[arg(long)]
    pub dims: Option<String>,
    /// Replace the last subject's T1 with a nonlinear outlier.
    #[arg(long)]
    pub outlier: bool,
}
