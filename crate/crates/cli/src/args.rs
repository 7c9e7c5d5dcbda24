use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "seld",
    version,
    about = "Sound event localization and detection toolkit"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset in both FOA and mic-array formats.
    Synth(SynthArgs),
    /// Extract and cache features for every clip.
    Features(FeaturesArgs),
    /// Train one regime into runs/<id>.
    Train(TrainArgs),
    /// Run a trained run over a split and store per-clip predictions.
    Infer(InferArgs),
    /// Score stored predictions and write metrics.csv.
    Eval(InferArgs),
    /// Plot timelines and tabulate runs.
    Report(ReportArgs),
    /// synth, features, train (two_stage), infer and eval in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Foa,
    Mic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Sed,
    DoaTransfer,
    DoaNt,
    Joint,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Root directory for the dataset, caches, runs and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for extraction and inference. 1 is fully deterministic (so are larger counts).
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 20)]
    pub clips: usize,
    /// Seconds per clip.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 11)]
    pub classes: usize,
    /// Dataset master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise level below the mixture, in dB.
    #[arg(long, default_value_t = 20.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// JSON file overriding any of the above or the scene generator fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = FormatArg::Foa)]
    pub format: FormatArg,
    /// Mel bands (and GCC lags).
    #[arg(long, default_value_t = 64)]
    pub n_mels: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_start_epoch: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seconds.
    #[arg(long)]
    pub segment_len: Option<f64>,
    /// Seconds.
    #[arg(long)]
    pub segment_hop: Option<f64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// SED checkpoint base path for doa_transfer (and for inference of doa_nt runs).
    #[arg(long)]
    pub sed_checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Four comma-separated convolution widths, e.g. 16,32,64,128.
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    /// Mel bands (and GCC lags).
    #[arg(long)]
    pub n_mels: Option<usize>,
    /// CNN variant without the recurrent layer.
    #[arg(long)]
    pub no_gru: bool,
    /// Weight of the DOA loss in joint training.
    #[arg(long)]
    pub joint_weight: Option<f64>,
    #[arg(long)]
    pub sed_threshold: Option<f64>,
    /// Run directory name under runs/. Defaults to <regime>-<format>-s<seed>.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Dataset manifest. Defaults to <out>/dataset/manifest.json.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub run_id: String,
    /// Rendering to run on; defaults to the one the run was trained on.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// SED checkpoint providing the mask for runs that have none (doa_nt).
    #[arg(long)]
    pub sed_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Root holding runs/; the report goes to <out>/report.
    #[arg(long)]
    pub out: PathBuf,
    /// Runs to include (repeatable).
    #[arg(long = "run-id", required = false)]
    pub run_ids: Vec<String>,
    /// Clips to plot; defaults to the first predicted clip of each run.
    #[arg(long = "clip")]
    pub clips: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub train: PipelineTrain,
}

/// Training flags of `pipeline` (the regime is always two_stage).
#[derive(Debug, Clone, Args)]
pub struct PipelineTrain {
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training seed; defaults to the dataset seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub n_mels: Option<usize>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// JSON file overriding the training configuration.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
}
