use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Quantized keypoint detection, binary descriptor matching, homography
/// evaluation and block-wise precision search.
#[derive(Debug, Parser)]
#[command(name = "zippy", version, about, max_term_width = 100)]
pub struct Cli {
    /// Worker threads; overrides ZIPPY_THREADS. Defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect keypoints and descriptors in one image.
    Extract(ExtractArgs),
    /// Match the binary descriptors of two detection files.
    Match(MatchArgs),
    /// Evaluate a detector on an HPatches-layout dataset.
    Eval(EvalArgs),
    /// Time the quantized forward pass against its float reference.
    Bench(BenchArgs),
    /// Time word-parallel descriptor matching on random sets.
    BenchMatch(BenchMatchArgs),
    /// Run the block-by-block precision search.
    Search(SearchArgs),
    /// Write a weight file with seeded random, calibrated weights.
    InitWeights(InitWeightsArgs),
    /// Write a synthetic HPatches-layout dataset.
    SynthDataset(SynthDatasetArgs),
}

/// Keypoint decoding flags shared by `extract` and `eval`.
#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Pixel radius of non-maximum suppression.
    #[arg(long, default_value_t = zippy_core::netgraph::decode::DEFAULT_NMS_RADIUS)]
    pub nms_radius: f32,

    /// Cells must score strictly above this value to become keypoints.
    #[arg(long, default_value_t = zippy_core::netgraph::decode::DEFAULT_SCORE_FLOOR)]
    pub score_floor: f32,

    /// Number of ones per binary descriptor (0 < k < M). Defaults to M/2.
    #[arg(long)]
    pub k: Option<usize>,

    /// Run the float reference of the network instead of the quantized one.
    #[arg(long)]
    pub float_reference: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Weight file.
    #[arg(long)]
    pub weights: PathBuf,

    /// Input image (PPM, PGM or PNG).
    #[arg(long)]
    pub image: PathBuf,

    /// Output detection file.
    #[arg(long)]
    pub out: PathBuf,

    /// Keypoint cap after suppression.
    #[arg(long, default_value_t = zippy_core::netgraph::decode::DEFAULT_MAX_KEYPOINTS)]
    pub max_kp: usize,

    /// Export top-k binary descriptors (default).
    #[arg(long, conflicts_with = "soft")]
    pub binary: bool,

    /// Export soft Bin.Norm descriptors instead of binary codes.
    #[arg(long)]
    pub soft: bool,

    #[command(flatten)]
    pub decode: DecodeArgs,

    /// Also write a JSON report with counts and timing.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    /// Keep pairs that are each other's nearest neighbor.
    Mutual,
    /// Keep every query's nearest neighbor.
    Nn,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Query detection file.
    #[arg(long)]
    pub query: PathBuf,

    /// Reference detection file.
    #[arg(long = "ref")]
    pub reference: PathBuf,

    /// Largest accepted Hamming distance. Defaults to M (accept all).
    #[arg(long)]
    pub max_dist: Option<u32>,

    #[arg(long, value_enum, default_value_t = PolicyArg::Mutual)]
    pub policy: PolicyArg,

    /// Output match file (JSON).
    #[arg(long)]
    pub out: PathBuf,

    /// Also write a JSON report with counts and timing.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with one subdirectory per sequence.
    #[arg(long)]
    pub dataset_dir: PathBuf,

    /// Weight file.
    #[arg(long)]
    pub weights: PathBuf,

    /// Output JSON report with per-sequence and aggregate metrics.
    #[arg(long)]
    pub report: PathBuf,

    /// Keypoints kept per image, best first.
    #[arg(long, default_value_t = zippy_core::homeval::metrics::DEFAULT_KEYPOINT_BUDGET)]
    pub max_kp: usize,

    /// Pixel tolerance of repeatability and matching score.
    #[arg(long, default_value_t = zippy_core::homeval::metrics::DEFAULT_EPS_PX)]
    pub eps: f64,

    /// Largest accepted Hamming distance when matching.
    #[arg(long)]
    pub max_dist: Option<u32>,

    /// Seed of the robust homography estimator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Include every pair's metrics in the report.
    #[arg(long)]
    pub pairs: bool,

    #[command(flatten)]
    pub decode: DecodeArgs,
}

/// `HxW`, e.g. `240x320`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

pub fn parse_image_size(s: &str) -> Result<ImageSize, String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let size = ImageSize {
        height: parse(h)?,
        width: parse(w)?,
    };
    if size.height == 0 || size.width == 0 {
        return Err(format!("image size must be positive, got {s:?}"));
    }
    Ok(size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// Int8 first conv, Bin-R encoder, early learned pooling, Int8 decoder.
    Mixed,
    /// Full precision with max pooling.
    Baseline,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Weight file. Without it, seeded random weights for --preset are used.
    #[arg(long)]
    pub weights: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = PresetArg::Mixed, conflicts_with = "weights")]
    pub preset: PresetArg,

    /// Input size as HxW; repeat to bench several sizes.
    #[arg(long, value_parser = parse_image_size, default_value = "240x320")]
    pub image_size: Vec<ImageSize>,

    /// Timed repetitions per path.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,

    /// Untimed runs before timing.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,

    /// Seed of the random weights and the input image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also write a JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchMatchArgs {
    /// Query descriptors.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,

    /// Reference descriptors.
    #[arg(long, default_value_t = 1000)]
    pub m: usize,

    /// Descriptor bits.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,

    /// Timed repetitions.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,

    /// Also time the bit-by-bit reference matcher.
    #[arg(long)]
    pub bit_loop: bool,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also write a JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorArg {
    /// Recorded ablation measurements.
    Replay,
    /// Measured forward latency with random weights.
    Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectorArg {
    /// Tolerance for replay, lexicographic for latency.
    Auto,
    /// Best score, then lowest latency.
    Lexicographic,
    /// Lowest latency within a tolerance of the best metrics.
    Tolerance,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Search space file. Defaults to the layer-partitioning space.
    #[arg(long)]
    pub space_config: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = EvaluatorArg::Replay)]
    pub evaluator: EvaluatorArg,

    #[arg(long, value_enum, default_value_t = SelectorArg::Auto)]
    pub selector: SelectorArg,

    /// Output search trace (JSON).
    #[arg(long)]
    pub trace_out: PathBuf,

    /// Input size of the latency evaluator as HxW.
    #[arg(long, value_parser = parse_image_size, default_value = "240x320")]
    pub image_size: ImageSize,

    /// Timed repetitions per candidate of the latency evaluator.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,

    /// Seed of the latency evaluator's weights and image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    /// Output weight file.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, value_enum, default_value_t = PresetArg::Mixed)]
    pub preset: PresetArg,

    /// Network description (`key = value` lines); overrides --preset.
    #[arg(long)]
    pub spec_file: Option<PathBuf>,

    /// Encoder widths as four comma-separated numbers.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,

    #[arg(long)]
    pub head_width: Option<usize>,

    #[arg(long)]
    pub descriptor_dim: Option<usize>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also write golden per-layer fixtures on the 64x64 test image.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthDatasetArgs {
    /// Output directory; sequences are created inside it.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 3)]
    pub sequences: usize,

    #[arg(long, default_value_t = 160)]
    pub width: usize,

    #[arg(long, default_value_t = 120)]
    pub height: usize,

    /// Views per sequence including the reference (2 to 6).
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(2..=6))]
    pub views: u64,

    /// Use identity warps without photometric changes.
    #[arg(long)]
    pub identity: bool,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
