use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use naf::attention::{KeyMode, PositionalMode};
use naf::restoration::NoiseKind;

#[derive(Parser, Debug)]
#[command(name = "naf", version, about = "Image-guided feature upsampling with neighborhood attention")]
pub struct Cli {
    /// Caps the number of worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Upsamples a feature map with a trained encoder.
    Upsample(UpsampleArgs),
    /// Trains an upsampler against a synthetic teacher.
    Train(TrainArgs),
    /// Trains or applies a denoiser.
    #[command(subcommand)]
    Denoise(DenoiseCommand),
    /// Attention maps and mean positional maps.
    Analyze(AnalyzeArgs),
    /// Classical joint-bilateral and Gaussian filters.
    Filter(FilterArgs),
    /// Analytic FLOP and parameter counts.
    Flops(FlopsArgs),
    /// Wall-time benchmark of the forward pass.
    Bench(BenchArgs),
    /// Re-runs the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct AttnOverrides {
    /// Window side length in low-resolution cells (odd).
    #[arg(long)]
    pub kernel: Option<usize>,
    /// rope | gaussian | manhattan | none
    #[arg(long)]
    pub pos: Option<PositionalMode>,
    /// avgpool | maxpool | bilinear
    #[arg(long)]
    pub keys: Option<KeyMode>,
}

#[derive(Args, Debug)]
pub struct UpsampleArgs {
    /// Low-resolution features, NPY `(h, w, d)`.
    #[arg(long)]
    pub features: PathBuf,
    /// Guidance image, PNG.
    #[arg(long)]
    pub image: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub weights: PathBuf,
    /// `auto` or an integer factor. When the image is not an exact multiple
    /// of the features, the integer result is resized bilinearly to the
    /// image size.
    #[arg(long, default_value = "auto")]
    pub scale: String,
    #[command(flatten)]
    pub attn: AttnOverrides,
    /// Output NPY.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Guidance channels `C`.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Encoder blocks per branch `L`.
    #[arg(long)]
    pub depth: Option<usize>,
    #[command(flatten)]
    pub attn: AttnOverrides,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of PNG training images; synthetic images when absent.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Target image size of the first stage; inputs are half of it.
    #[arg(long)]
    pub size: Option<usize>,
    /// Adds a refinement stage with targets of this size.
    #[arg(long)]
    pub refine: Option<usize>,
    /// Teacher patch size.
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Teacher feature dimension.
    #[arg(long, default_value_t = 16)]
    pub teacher_dim: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Held-out images to evaluate against bilinear upsampling after training.
    #[arg(long, default_value_t = 0)]
    pub eval: usize,
}

#[derive(Subcommand, Debug)]
pub enum DenoiseCommand {
    /// Trains a denoiser on clean images corrupted on the fly.
    Train(DenoiseTrainArgs),
    /// Denoises a PNG.
    Apply(DenoiseApplyArgs),
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// gaussian | channel_salt_pepper
    #[arg(long, default_value = "gaussian")]
    pub noise: NoiseKind,
    /// Standard deviation (gaussian) or corruption probability (salt-pepper).
    #[arg(long, default_value_t = 0.1)]
    pub level: f64,
    /// `lo,hi`: draw the level per sample from this range.
    #[arg(long)]
    pub level_range: Option<String>,
}

#[derive(Args, Debug)]
pub struct DenoiseTrainArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Crop size.
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Held-out images to report PSNR / SSIM on after training.
    #[arg(long, default_value_t = 0)]
    pub eval: usize,
}

#[derive(Args, Debug)]
pub struct DenoiseApplyArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Noisy input PNG, or the clean image when `--add-noise` is given.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clean reference PNG for metrics.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Corrupt the input first (it then also serves as the clean reference).
    #[arg(long)]
    pub add_noise: bool,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Seed of the added noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Appends `image,psnr,ssim` rows to this CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Attention weights of one pixel: `p=row,col` (or `row,col`).
    #[arg(long, conflicts_with = "trig", requires_all = ["weights", "image"])]
    pub map: Option<String>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Upsampling factor the map is computed for.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[command(flatten)]
    pub attn: AttnOverrides,
    /// Mean cos / sin of the relative phases over this odd window.
    #[arg(long)]
    pub trig: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = naf::rope::DEFAULT_ROPE_BASE)]
    pub base: f64,
    /// NPY output (the attention map or the cosine map).
    #[arg(long)]
    pub out: PathBuf,
    /// Heat-map PNG of the attention map, or NPY of the sine map.
    #[arg(long)]
    pub extra_out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    Jbu,
    Jbf,
    Gaussian,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long, value_enum)]
    pub method: FilterMethod,
    /// Signal NPY (low-resolution features for jbu).
    #[arg(long)]
    pub input: PathBuf,
    /// Guidance PNG (jbu and jbf).
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sigma_s: Option<f64>,
    #[arg(long)]
    pub sigma_r: Option<f64>,
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Low-resolution side length.
    #[arg(long, default_value_t = 28)]
    pub lr: usize,
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
    #[arg(long, default_value_t = 9)]
    pub kernel: usize,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Feature dimension `d`.
    #[arg(long, default_value_t = 384)]
    pub dim: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated low-resolution side lengths.
    #[arg(long, default_value = "8,16")]
    pub sizes: String,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long, default_value_t = 9)]
    pub kernel: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Also time the full-attention oracle at this low-resolution size.
    #[arg(long)]
    pub dense: Option<usize>,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
