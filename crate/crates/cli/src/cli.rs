use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "segkit",
    version,
    about = "Brain tumor detection and 3D attention U-Net segmentation"
)]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for the split, model initialization and shuffling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for per-case stages.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop, detect, resize and normalize every case into VOL1 tensors.
    Preprocess(DatasetArgs),
    /// Run tumor detection only and write the detection reports.
    Detect(DatasetArgs),
    /// Train the model on the preprocessed training split.
    Train(TrainArgs),
    /// Score a checkpoint on a preprocessed split.
    Evaluate(EvaluateArgs),
    /// Summarize evaluation metrics as a table.
    Report(ReportArgs),
    /// Write each slice of a volume as an 8-bit PGM image.
    ExportSlices(ExportArgs),
    /// Generate a synthetic dataset in BraTS folder layout.
    Phantom(PhantomArgs),
    /// Write or inspect the run configuration.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset root; overrides `dataset_root`.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from the latest round checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to the final checkpoint in the output directory.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Defaults to `metrics.json` in the output directory.
    #[arg(long, value_name = "PATH")]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// NIfTI (`.nii`) or VOL1 volume.
    pub volume: PathBuf,
    #[arg(long, value_enum, default_value_t = Axis::Axial)]
    pub axis: Axis,
    /// Channel to export from a multi-channel VOL1 tensor.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Destination; defaults to `slices/` in the output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Destination dataset root; defaults to `dataset_root`.
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [64, 64, 64])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 12.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 6)]
    pub specks: usize,
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Write the full default configuration to PATH, or stdout.
    Init {
        path: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print the effective configuration after flag overrides.
    Show,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Slices along z.
    Axial,
    /// Slices along y.
    Coronal,
    /// Slices along x.
    Sagittal,
}
