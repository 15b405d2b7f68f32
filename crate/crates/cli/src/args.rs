use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "aa-nowcast", version, about = "Radar and cloud-cover nowcasting with attention-augmented TransUNet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic advecting-field dataset.
    Synth(SynthArgs),
    /// Crop, filter, window, split and normalize a dataset.
    Prepare(PrepareArgs),
    /// Train one model and keep its best checkpoint.
    Train(TrainArgs),
    /// Score checkpoints and the persistence baseline on a split.
    Eval(EvalArgs),
    /// Train and score one model per transformer depth.
    SweepLayers(SweepArgs),
    /// Test-time dropout uncertainty per lead time.
    Uncertainty(UncertaintyArgs),
    /// Parameter counts per model part.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Blobs,
    Fronts,
    Clouds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModelArg {
    AaTransunet,
    Transunet,
    Unet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Precip,
    Cloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Target,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Last,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    Precipitation,
    Cloud,
    Tiny,
    Smoke,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Csv,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two numbers such as 6,10")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, env = "AA_NOWCAST_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of sequences.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: KindArg,
    /// Frames per sequence (default 18, or 10 for clouds).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Minimum and maximum number of cells per sequence, e.g. 6,10.
    #[arg(long, value_parser = parse_pair)]
    pub cells: Option<(usize, usize)>,
    /// Keep every cell in place.
    #[arg(long)]
    pub still: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "precip")]
    pub mode: ModeArg,
    /// Minimum fraction of rainy pixels, e.g. 0.5 (NL-50) or 0.2 (NL-20).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "target")]
    pub scope: ScopeArg,
    /// Centre crop size in pixels.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub input_frames: Option<usize>,
    #[arg(long)]
    pub gap: Option<usize>,
    #[arg(long)]
    pub output_frames: Option<usize>,
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, env = "AA_NOWCAST_SEED", default_value_t = 0)]
    pub seed: u64,
}

/// Model and training settings shared by `train` and `sweep-layers`.
#[derive(Args, Debug, Clone)]
pub struct RecipeArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Built-in settings to start from (default follows the dataset mode).
    #[arg(long, value_enum)]
    pub template: Option<TemplateArg>,
    /// JSON file with optional `model` and `train` sections overriding the
    /// template.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, env = "AA_NOWCAST_SEED")]
    pub seed: Option<u64>,
    /// Print one line per epoch.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "aa_transunet")]
    pub model: ModelArg,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    /// Number of transformer layers.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub depth: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directories; persistence is always scored.
    #[arg(long, num_args = 0..)]
    pub checkpoints: Vec<PathBuf>,
    /// Row labels for the checkpoints, in order.
    #[arg(long, value_delimiter = ',')]
    pub names: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = aa_nowcast::evaluate::THRESHOLD)]
    pub threshold: f64,
    /// Average classification scores per frame instead of pooling pixels.
    #[arg(long)]
    pub per_image: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Metrics CSV; a `*`-marked table goes next to it with a `.txt`
    /// extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum, default_value = "aa_transunet")]
    pub model: ModelArg,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    /// Transformer depths to train.
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,12,18",
          value_parser = clap::value_parser!(u64).range(1..))]
    pub depths: Vec<u64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Stochastic passes per window.
    #[arg(long, default_value_t = aa_nowcast::evaluate::DEFAULT_SAMPLES)]
    pub k: usize,
    /// Drop probability during sampling.
    #[arg(long, default_value_t = aa_nowcast::evaluate::DEFAULT_DROPOUT)]
    pub p: f64,
    /// Use at most this many windows.
    #[arg(long)]
    pub max_windows: Option<usize>,
    #[arg(long, env = "AA_NOWCAST_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Model to report; all three when omitted.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long, value_enum, default_value = "precipitation")]
    pub template: TemplateArg,
    /// JSON file with an optional `model` section overriding the template.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub depth: Option<u64>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
