//! Command-line surface: four subcommands covering dataset generation,
//! training, ablation attribution, and the three-model comparison report.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "debiaslab",
    version,
    about = "Adversarial debiasing experiments on synthetic biased image data",
    after_help = "Environment: DBLB_PRECISION={f32|f64} selects the compute precision (default f32;\n\
                  use f64 for gradient verification).\n\
                  Exit codes: 0 ok, 2 usage, 3 data/config error, 4 numeric divergence."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic biased dataset directory.
    Generate(GenerateArgs),
    /// Train one model (baseline, full_debias, or partial_debias).
    Train(TrainArgs),
    /// Rank conv layers by ablation attribution and emit the layer selection.
    Ablate(AblateArgs),
    /// Compare three checkpoints on the test split: table, fairness CSVs, SVG plots.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Number of patients; each gets a fixed protected group.
    #[arg(long, default_value_t = 100)]
    pub patients: usize,
    #[arg(long, default_value_t = 4)]
    pub images_per_patient: usize,
    #[arg(long, default_value_t = 28)]
    pub height: usize,
    #[arg(long, default_value_t = 28)]
    pub width: usize,
    /// Target classes C_y (2..=4 template patterns).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Protected groups C_z (2..=4 watermark corners).
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    /// Probability a train/validation patient's class draws are skewed
    /// toward the group's favored classes (test patients are never skewed).
    #[arg(long, default_value_t = 0.9)]
    pub bias: f64,
    /// Pixel strength of the group watermark.
    #[arg(long, default_value_t = 0.4)]
    pub amplitude: f64,
    /// Gaussian pixel noise sigma.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// baseline | full_debias | partial_debias
    #[arg(long)]
    pub mode: String,
    /// Dataset directory (from `generate`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint + train log.
    #[arg(long)]
    pub out: PathBuf,
    /// Adversarial loss weight for both passes.
    #[arg(long, default_value_t = 0.53)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Partial mode: checkpoint of the trained baseline to fine-tune.
    #[arg(long)]
    pub baseline_checkpoint: Option<PathBuf>,
    /// Partial mode: reuse a previously written ablation report CSV instead
    /// of running the study inline.
    #[arg(long)]
    pub ablation_report: Option<PathBuf>,
    /// Fraction of most-similar filters to zero per layer in the inline
    /// ablation study.
    #[arg(long, default_value_t = 0.10)]
    pub fraction: f64,
    /// How many top-ranked layers feed the fine-tuning pivot.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Pass 2 re-runs the forward with post-step parameters.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub pass2_fresh_forward: bool,
    /// Pass 2 also steps the adversarial head.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub pass2_updates_adversary: bool,
    /// immediate | summed
    #[arg(long, default_value = "immediate")]
    pub pass2_apply: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Trained baseline checkpoint to attribute.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    pub fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Seed for the probe fit if the checkpoint's adversarial head has not
    /// been fitted yet.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Baseline checkpoint.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Full-debias checkpoint.
    #[arg(long)]
    pub full: PathBuf,
    /// Partial-debias checkpoint.
    #[arg(long)]
    pub partial: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Reference protected group for disparity ratios.
    #[arg(long, default_value_t = 0)]
    pub ref_group: usize,
    #[arg(long)]
    pub out: PathBuf,
}
