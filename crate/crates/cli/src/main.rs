//! `c3g`: synthesize scenes, train and run the decoders, evaluate.
//!
//! Setting precedence, lowest first: built-in defaults, `--config` file,
//! `--set section.key=value` overrides in order, then dedicated command flags
//! such as `--seed` or `--steps`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure caused by the invocation rather than by the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "c3g", version, about = "Compact 3D Gaussian scene decoding at desk scale")]
pub struct Cli {
    /// TOML run configuration with [data] [scene] [model] [train] [features] [tto] [pose] [eval] sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; applied after --config and before command flags.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for rendering and ray tracing (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `synth`; repeat for several scenes. Without it,
    /// scenes are generated from the [data] and [scene] sections.
    #[arg(long = "data", value_name = "DIR")]
    pub data: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Checkpoint of the Gaussian decoder (c3g.bin).
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Dataset directory whose input views are decoded.
    #[arg(long, value_name = "DIR")]
    pub views: PathBuf,
    /// Number of input views (default: [eval] input_views).
    #[arg(long, value_name = "V")]
    pub inputs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural scene and export its rig views, cameras and evaluation pairs.
    Synth {
        /// Scene spec as `key = value` lines, applied over the [scene] section.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Scene seed (default: [data] scene_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the Gaussian decoder; writes c3g.bin and train.log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Output run directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training seed (default: [train] seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Optimizer steps (default: [train] steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the feature decoder against a frozen Gaussian decoder; writes c3gf.bin.
    TrainFeatures {
        /// Frozen Gaussian decoder checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Output run directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training seed (default: [features] seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Optimizer steps (default: [features] steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Decode a dataset's input views and render the Gaussians at one camera.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        /// Target camera as `cams.txt:INDEX`.
        #[arg(long, value_name = "FILE:INDEX")]
        pose: String,
        /// Output PPM image.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Low-pass dilation of the render.
        #[arg(long, default_value_t = c3g_core::protocol::EVAL_S)]
        s: f64,
    },
    /// Render lifted features at one camera, colored by argmax class.
    RenderFeatures {
        #[command(flatten)]
        scene: SceneArgs,
        /// Feature decoder checkpoint (c3gf.bin).
        #[arg(long, value_name = "FILE")]
        fckpt: PathBuf,
        /// Target camera as `cams.txt:INDEX`.
        #[arg(long, value_name = "FILE:INDEX")]
        pose: String,
        /// Output PPM image.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write the raw H x W x D feature map to this file.
        #[arg(long, value_name = "FILE")]
        raw: Option<PathBuf>,
    },
    /// Export per-Gaussian attention heatmaps as grayscale PPMs, one per (Gaussian, view).
    Attn {
        #[command(flatten)]
        scene: SceneArgs,
        /// Gaussian indices, comma separated (default: all).
        #[arg(long, value_delimiter = ',', value_name = "I,J,...")]
        gaussians: Vec<usize>,
        /// Decoder layer (default: last).
        #[arg(long)]
        layer: Option<usize>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Refine a feed-forward prediction on its input views by test-time optimization.
    Tto {
        #[command(flatten)]
        scene: SceneArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// TTO steps (default: [tto] steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Recover a target camera against frozen Gaussians.
    RefinePose {
        /// Gaussians saved by `tto` (gaussians_tto.bin).
        #[arg(long, value_name = "FILE")]
        gaussians: PathBuf,
        /// Dataset directory holding the target view.
        #[arg(long, value_name = "DIR")]
        views: PathBuf,
        /// Rig index of the target view.
        #[arg(long)]
        target: usize,
        /// Starting camera as `cams.txt:INDEX` (default: the target camera perturbed).
        #[arg(long, value_name = "FILE:INDEX")]
        init: Option<String>,
        /// Rotation of the default perturbation, in degrees.
        #[arg(long, default_value_t = 5.0)]
        rot_deg: f64,
        /// Translation of the default perturbation, as a fraction of the scene extent.
        #[arg(long, default_value_t = 0.03)]
        trans_frac: f64,
        /// Seed of the perturbation directions.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Held-out novel-view PSNR and SSIM.
    EvalNvs {
        /// Gaussian decoder checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Number of input views (default: [eval] input_views).
        #[arg(long, value_name = "V")]
        inputs: Option<usize>,
        /// Output directory for metrics.txt and summary.txt.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Two-view correspondence PCK of raw and lifted features, by angle bin.
    EvalPck {
        /// Gaussian decoder checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Feature decoder checkpoint.
        #[arg(long, value_name = "FILE")]
        fckpt: PathBuf,
        /// Pair list written by `synth`.
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
        /// Dataset the pairs belong to (default: the pair file's directory).
        #[arg(long, value_name = "DIR")]
        views: Option<PathBuf>,
        /// Number of input views (default: [eval] input_views).
        #[arg(long, value_name = "V")]
        inputs: Option<usize>,
        /// Output directory (default: the pair file's directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient gate over every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random rasterizer micro-scenes.
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Write gate errors and a manifest here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
