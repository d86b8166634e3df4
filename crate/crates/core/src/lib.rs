#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Compact feed-forward 3D Gaussian splatting.
//!
//! A fixed budget of learnable query tokens attends over multi-view patch
//! features and decodes one Gaussian per token. The same attention pattern is
//! replayed to lift arbitrary 2D features onto those Gaussians.

pub mod config;
pub mod eval;
pub mod gradgate;
pub mod model;
pub mod protocol;
pub mod real;
pub mod scene;
pub mod splat;
pub mod tensor;
pub mod train;

pub use real::Real;
