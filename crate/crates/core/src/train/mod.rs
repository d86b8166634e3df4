//! Losses, schedules, optimizers and the training loops.

mod c3g;
mod c3gf;
mod config;
mod data;
mod fit;
mod loss;
mod optim;
mod pose;
mod schedule;
mod tto;

pub use c3g::{format_log, train_c3g, LogRow, TrainRun};
pub use c3gf::{background_feature, composite_background, input_features, noise_seed, target_features, train_c3gf, upsample, FeatureRun};
pub use config::{FeatureTrainConfig, TrainConfig};
pub use data::{draw_sample, held_out_indices, Sample, TrainScene};
pub use fit::seed_from_depth;
pub use loss::{feature_loss, photometric_loss, Loss};
pub use optim::{AdamW, Moments, StepOutcome};
pub use pose::{refine_pose, PoseConfig, PoseResult};
pub use schedule::{cosine_lr, lowpass_schedule, LowpassSchedule};
pub use tto::{camera_extent, densify, multi_view_loss, tto_optimize, view_loss, DensifyConfig, DensifyOutcome, GaussianAdam, TtoConfig, TtoResult, View};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (scene {scene})")]
    NonFinite { step: usize, scene: usize },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Splat(#[from] crate::splat::SplatError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
