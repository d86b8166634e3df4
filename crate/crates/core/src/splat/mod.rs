//! Gaussian projection and differentiable depth-ordered alpha compositing.

mod camera;
mod gaussians;
pub mod io;
mod project;
mod raster;

pub use camera::{Camera, DEFAULT_NEAR};
pub use gaussians::{normalize_quat, quat_to_matrix, sigmoid, Activated, GaussianSet, QUAT_EPS};
pub use project::{depth_order, project_gaussian, Projected2D};
pub use raster::{
    rasterize_backward, rasterize_forward, reference_rasterize, Channels, GaussianGrads, RasterConfig,
    RenderGrads, RenderOutput, ALPHA_MAX, ALPHA_MIN, TILE,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("Gaussian {index} has a non-finite parameter")]
    NonFinite { index: usize },
    #[error("feature channel requested but the Gaussian set carries no features")]
    MissingFeatures,
    #[error("feature block must be [{expected}, d'], got {got:?}")]
    FeatureShape { expected: usize, got: Vec<usize> },
    #[error("gradient for `{channel}` has shape {got:?}, expected {expected:?}")]
    GradShape {
        channel: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("malformed Gaussian file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
