use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cra_core::lwgc::GateKind;
use cra_core::resample::{DownMethod, UpMethod};
use cra_core::training::MaskMode;

#[derive(Debug, Parser)]
#[command(
    name = "cra",
    version,
    about = "Contextual residual aggregation inpainting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for library kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill the masked region of an image of any size.
    Inpaint(InpaintArgs),
    /// Run the pipeline at several resolutions and report costs as CSV.
    Bench(BenchArgs),
    /// Train a generator with the alternating critic/generator loop.
    Train(TrainArgs),
    /// Write seeded free-form masks as PNG files.
    Maskgen(MaskgenArgs),
    /// Finite-difference check of every differentiable op and gate kind.
    Checkgrad,
    /// Compare resampling pairs or gate kinds.
    #[command(subcommand)]
    Ablate(AblateCommand),
}

/// Where the generator comes from.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Generator weight container.
    #[arg(long)]
    pub weights: Option<PathBuf>,

    /// Use the stub generator (returns its input) instead of weights.
    #[arg(long, conflicts_with = "weights")]
    pub stub: bool,

    /// Toy network size (128) for --stub or freshly initialized weights.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    #[arg(long, default_value = "avg", value_parser = parse_down)]
    pub down: DownMethod,

    #[arg(long, default_value = "bilinear", value_parser = parse_up)]
    pub up: UpMethod,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub input: PathBuf,

    /// Hole mask; any nonzero pixel is a hole.
    #[arg(long)]
    pub mask: PathBuf,

    #[arg(long)]
    pub output: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub methods: MethodArgs,

    /// Reflect-pad to the next multiple of the network size and crop back.
    #[arg(long)]
    pub pad: bool,
}

#[derive(Debug, Args)]
pub struct GateArgs {
    /// Gate kinds for the coarse network (comma separated for ablations).
    #[arg(long, value_delimiter = ',', value_parser = parse_gate)]
    pub gates_coarse: Vec<GateKind>,

    /// Gate kinds for the refine network (comma separated for ablations).
    #[arg(long, value_delimiter = ',', value_parser = parse_gate)]
    pub gates_refine: Vec<GateKind>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Square resolutions to run.
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048")]
    pub bench_sizes: Vec<usize>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub gates: GateArgs,

    /// Skip resolutions whose estimated peak allocation exceeds this.
    #[arg(long, default_value_t = 4096)]
    pub mem_budget_mb: u64,

    /// CSV destination (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory of square PNG training images.
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,

    /// Train on this many generated images instead of a directory.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Directory for checkpoints and the JSON-lines log.
    #[arg(long)]
    pub output: PathBuf,

    /// Toy scale: 128x128 images, quarter-width networks.
    #[arg(long)]
    pub toy: bool,

    /// Generator updates (default 500).
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub batch: Option<usize>,

    #[arg(long)]
    pub lr: Option<f32>,

    #[command(flatten)]
    pub gates: GateArgs,
}

#[derive(Debug, Args)]
pub struct MaskgenArgs {
    #[arg(long)]
    pub output: PathBuf,

    #[arg(long, default_value_t = 16)]
    pub count: usize,

    #[arg(long, default_value_t = 512)]
    pub size: usize,

    #[arg(long, default_value = "brush", value_parser = parse_mode)]
    pub mode: MaskMode,

    /// Directory of template mask PNGs for template and mixed modes.
    #[arg(long)]
    pub templates: Option<PathBuf>,

    /// Largest hole area as a fraction of the image.
    #[arg(long, default_value_t = 0.25)]
    pub max_area: f64,
}

#[derive(Debug, Subcommand)]
pub enum AblateCommand {
    /// Every down/up resampling pair on one image; the input is the ground truth.
    Resample(AblateResampleArgs),
    /// Train one toy model per coarse/refine gate combination.
    Gates(AblateGatesArgs),
}

#[derive(Debug, Args)]
pub struct AblateResampleArgs {
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long)]
    pub mask: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateGatesArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Generator updates per combination.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,

    #[command(flatten)]
    pub gates: GateArgs,

    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_down(s: &str) -> Result<DownMethod, String> {
    s.parse().map_err(|e: cra_core::CraError| e.to_string())
}

fn parse_up(s: &str) -> Result<UpMethod, String> {
    s.parse().map_err(|e: cra_core::CraError| e.to_string())
}

fn parse_gate(s: &str) -> Result<GateKind, String> {
    s.parse().map_err(|e: cra_core::CraError| e.to_string())
}

fn parse_mode(s: &str) -> Result<MaskMode, String> {
    s.parse().map_err(|e: cra_core::CraError| e.to_string())
}
