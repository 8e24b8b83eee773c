use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deep_taylor::diagnostics::{Tolerances, DEFAULT_HISTOGRAM_BINS};
use deep_taylor::network::{Preset, DEFAULT_LEARNING_RATE};
use deep_taylor::relevance::{MinMaxInit, DEFAULT_MINMAX_LEARNING_RATE};

#[derive(Debug, Parser)]
#[command(
    name = "deep-taylor",
    version,
    about = "Train detection-pooling networks on paired MNIST digits and explain their outputs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize paired-digit samples and write them to a pair archive.
    Synth(SynthArgs),
    /// Train a preset network and write a model archive.
    Train(TrainArgs),
    /// Write one heatmap per sample as PGM image, scaling sidecar and CSV.
    Explain(ExplainArgs),
    /// Run one heatmapping method through the consistency diagnostics.
    Evaluate(EvaluateArgs),
    /// Run several methods and write a side-by-side verdict table.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Directory holding the MNIST IDX image and label files.
    #[arg(long, env = "DEEP_TAYLOR_DATA_DIR", default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Number of paired samples to synthesize.
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    /// Seed for pair synthesis.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Paste digits without random translation.
    #[arg(long)]
    pub no_translate: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Pair archive written by `synth`; synthesized from MNIST when absent.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Pair archive to write.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    MnistOneLayer,
    MnistTwoLayer,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::MnistOneLayer => Preset::MnistOneLayer,
            PresetArg::MnistTwoLayer => Preset::MnistTwoLayer,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MinMaxInitArg {
    Random,
    FromLayer,
}

impl From<MinMaxInitArg> for MinMaxInit {
    fn from(i: MinMaxInitArg) -> Self {
        match i {
            MinMaxInitArg::Random => MinMaxInit::Random,
            MinMaxInitArg::FromLayer => MinMaxInit::FromLayer,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub samples: SampleArgs,
    /// Network architecture.
    #[arg(long, value_enum, default_value = "mnist-one-layer")]
    pub preset: PresetArg,
    /// SGD iterations (minibatches).
    #[arg(long, default_value_t = 50_000)]
    pub iterations: usize,
    /// Samples per minibatch.
    #[arg(long, default_value_t = 20)]
    pub minibatch: usize,
    /// SGD step size.
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub learning_rate: f64,
    /// Standard deviation of the normal weight initialization.
    #[arg(long, default_value_t = 0.05)]
    pub init_std: f64,
    /// Seed for weight initialization and minibatch order.
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    /// Also fit a min-max model of the lowest block (two-layer preset).
    #[arg(long)]
    pub minmax: bool,
    /// SGD iterations for the min-max model.
    #[arg(long, default_value_t = 50_000)]
    pub minmax_iterations: usize,
    /// SGD step size for the min-max model.
    #[arg(long, default_value_t = DEFAULT_MINMAX_LEARNING_RATE)]
    pub minmax_learning_rate: f64,
    /// Start the min-max bottom weights from the modelled layer or at random.
    #[arg(long, value_enum, default_value = "from-layer")]
    pub minmax_init: MinMaxInitArg,
    /// Model archive to write.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model archive written by `train`.
    #[arg(long, short)]
    pub model: PathBuf,
    #[command(flatten)]
    pub samples: SampleArgs,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub input: ModelArgs,
    /// Heatmapping method, e.g. `deep-taylor`, `sensitivity`, `lrp-epsilon=10`.
    #[arg(long, default_value = "deep-taylor")]
    pub method: String,
    /// Deep Taylor rule assignment; shorthand for `--method deep-taylor=SPEC`.
    #[arg(long, conflicts_with = "method", value_name = "SPEC")]
    pub rules: Option<String>,
    /// Explain these sample indices instead of the first `--limit` (default 10).
    #[arg(long, value_delimiter = ',')]
    pub indices: Vec<usize>,
    /// Directory for the heatmap files.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToleranceArgs {
    /// Largest relative conservation error of a conservative method.
    #[arg(long, default_value_t = Tolerances::default().conservation)]
    pub conservation_tol: f64,
    /// Smallest pixel relevance of a positive method.
    #[arg(long, default_value_t = Tolerances::default().positivity, allow_negative_numbers = true)]
    pub positivity_tol: f64,
    /// Largest gap ratio of a near-conservative method.
    #[arg(long, default_value_t = Tolerances::default().near_conservation)]
    pub near_tol: f64,
    /// Histogram bins over |R|.
    #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
    pub bins: usize,
}

impl ToleranceArgs {
    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            conservation: self.conservation_tol,
            positivity: self.positivity_tol,
            near_conservation: self.near_tol,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: ModelArgs,
    /// Heatmapping method, e.g. `deep-taylor`, `minmax`, `nearest-root=0.1`.
    #[arg(long, default_value = "deep-taylor")]
    pub method: String,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    /// Directory for the CSV files and report.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: ModelArgs,
    /// Methods to compare, separated by `;`. Defaults to every deep Taylor
    /// variant and baseline that applies to the model.
    #[arg(long, value_delimiter = ';')]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    /// Directory for the CSV files and verdict table.
    #[arg(long, short)]
    pub out: PathBuf,
}
