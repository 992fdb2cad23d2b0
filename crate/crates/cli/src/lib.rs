//! Command-line front end for corrnet: scene and benchmark generation,
//! training, detection, matching, evaluation, figures and replay.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime failures. Every command writes a `manifest.json` next to its
//! outputs; `corrnet replay` re-runs a command from that file.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use corrnet::detector::{DetectionMode, LatentSource};

mod commands;
pub mod config;
pub mod manifest;
pub mod render;

/// Environment variable naming the default checkpoint directory.
pub const CHECKPOINT_DIR_ENV: &str = "CORRNET_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "corrnet", version, about = "Contrastive keypoint detection and description")]
pub struct Cli {
    /// Maximum number of worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render random synthetic scenes to PNG files.
    GenScenes(GenScenesArgs),
    /// Build an HPatches-layout benchmark from images or synthetic scenes.
    GenSynthetic(GenSyntheticArgs),
    /// Train the detector network with the contrastive objective.
    Train(TrainArgs),
    /// Fine-tune a trained network into a patch descriptor.
    TrainDescriptor(TrainDescriptorArgs),
    /// Detect keypoints on one image or an image pair.
    Detect(DetectArgs),
    /// Describe and match keypoints, then fit a homography.
    Match(MatchArgs),
    /// Score a detector on a benchmark directory.
    Evaluate(EvaluateArgs),
    /// Draw a pair side by side with keypoints and matches.
    Visualize(VisualizeArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchmarkModeArg {
    Illumination,
    Viewpoint,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Source images (one sequence per image).
    #[arg(long, conflicts_with = "scenes", required_unless_present = "scenes")]
    pub images: Option<PathBuf>,
    /// Number of synthetic source scenes to render instead of reading images.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long, value_enum, default_value_t = BenchmarkModeArg::Illumination)]
    pub mode: BenchmarkModeArg,
    /// Target images per sequence.
    #[arg(long, default_value_t = 5)]
    pub targets: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, env = CHECKPOINT_DIR_ENV, default_value = "checkpoints")]
    pub out: PathBuf,
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub overlap_min: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Benchmark directory scored every `eval_every` epochs.
    #[arg(long)]
    pub probe_benchmark: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDescriptorArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Trained detector checkpoint to start from.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, env = CHECKPOINT_DIR_ENV, default_value = "checkpoints")]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keypoints per image used as neighbourhood centres.
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DetectorFlags {
    #[arg(long)]
    pub mode: Option<DetectionMode>,
    #[arg(long)]
    pub source: Option<LatentSource>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// NMS window side in pixels.
    #[arg(long)]
    pub nms: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub tgt: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Descriptor checkpoint.
    #[arg(long)]
    pub descriptor: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub kps_ref: PathBuf,
    #[arg(long)]
    pub kps_tgt: PathBuf,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
    #[arg(long)]
    pub inlier_px: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long, required_unless_present = "random", conflicts_with = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Score the uniform-noise baseline instead of a trained network.
    #[arg(long)]
    pub random: bool,
    /// Descriptor checkpoint; enables matching and homography accuracy.
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
    /// Correctness radius in pixels.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seed of the random baseline and of RANSAC.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub kps_ref: PathBuf,
    #[arg(long)]
    pub kps_tgt: PathBuf,
    /// Match file written by `corrnet match`.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    /// Ground-truth homography; adds the repeatability score to the title.
    #[arg(long)]
    pub homography: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the re-run (default: the original one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();

    let result = match cli.jobs {
        Some(0) => Err(UsageError("--jobs must be >= 1".into()).into()),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::dispatch(cli.command, recorded)),
            Err(e) => Err(e.into()),
        },
        None => commands::dispatch(cli.command, recorded),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<corrnet::Error>() {
        Some(corrnet::Error::InvalidConfig(_)) => 2,
        _ => 1,
    }
}
