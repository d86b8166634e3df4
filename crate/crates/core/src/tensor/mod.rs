//! Dense arrays and a reverse-mode differentiable expression graph.

mod array;
mod gradcheck;
mod graph;
pub mod io;
mod params;

pub use array::{numel, Array};
pub use gradcheck::finite_diff_check;
pub use graph::{Bindings, Chain, Evaluation, Gradients, Graph, NodeId, COSINE_EPS, LAYER_NORM_EPS};
pub use params::ParamSet;

pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("slice {start}..{end} on axis {axis} of shape {shape:?}")]
    BadSlice {
        shape: Vec<usize>,
        axis: usize,
        start: usize,
        end: usize,
    },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("leaf `{name}` declared as {expected:?} but bound to {got:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { node: usize, op: &'static str },
    #[error("seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("malformed array payload: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
