use crate::real::Real;
use crate::tensor::Array;

use super::ModelError;

/// Attention of one head in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace<T> {
    /// Softmax weights over the whole sequence, `T x T`.
    pub weights: Array<T>,
    /// Query and key activations of this head, `T x d_head`.
    pub q: Array<T>,
    pub k: Array<T>,
}

/// Attention weights captured during one decode.
///
/// The sequence is `[queries; view 0 tokens; view 1 tokens; ...]`, each view
/// contributing `grid_h * grid_w` tokens in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T> {
    pub n_queries: usize,
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Indexed `[layer][head]`.
    pub layers: Vec<Vec<HeadTrace<T>>>,
}

impl<T: Real> AttentionTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.n_queries + self.views * self.grid_h * self.grid_w
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Weights of the `N` query rows for one head.
    pub fn query_rows(&self, layer: usize, head: usize) -> &[T] {
        let t = self.seq_len();
        &self.layers[layer][head].weights.data()[..self.n_queries * t]
    }

    /// Largest `|sum(row) - 1|` over every stored row.
    pub fn max_row_error(&self) -> f64 {
        let t = self.seq_len();
        self.layers
            .iter()
            .flatten()
            .flat_map(|h| h.weights.data().chunks(t))
            .map(|row| (row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_indices<T: Real>(trace: &AttentionTrace<T>, i: usize, layer: usize, view: usize) -> Result<(), ModelError> {
    if i >= trace.n_queries {
        return Err(ModelError::Index(format!("Gaussian {i} of {}", trace.n_queries)));
    }
    if layer >= trace.layers.len() {
        return Err(ModelError::Index(format!("layer {layer} of {}", trace.layers.len())));
    }
    if view >= trace.views {
        return Err(ModelError::Index(format!("view {view} of {}", trace.views)));
    }
    Ok(())
}

/// Head-averaged logits `q_i . k_j / sqrt(d_head)` of query `i` against the
/// key tokens of `view`, as an `h x w` map.
pub fn attention_logit_map<T: Real>(
    trace: &AttentionTrace<T>,
    i: usize,
    layer: usize,
    view: usize,
) -> Result<Array<f64>, ModelError> {
    check_indices(trace, i, layer, view)?;
    let hw = trace.grid_h * trace.grid_w;
    let first = trace.n_queries + view * hw;
    let heads = &trace.layers[layer];
    let mut out = Array::zeros(&[trace.grid_h, trace.grid_w]);
    for h in heads {
        let dh = h.q.last_dim();
        let scale = 1.0 / (dh as f64).sqrt() / heads.len() as f64;
        let q = h.q.row(i);
        for (j, o) in out.data_mut().iter_mut().enumerate() {
            let k = h.k.row(first + j);
            *o += scale * q.iter().zip(k).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
        }
    }
    Ok(out)
}

/// Min-max normalized [`attention_logit_map`]; a constant map becomes zeros.
pub fn attention_heatmap<T: Real>(
    trace: &AttentionTrace<T>,
    i: usize,
    layer: usize,
    view: usize,
) -> Result<Array<f64>, ModelError> {
    Ok(min_max(&attention_logit_map(trace, i, layer, view)?))
}

pub(crate) fn min_max(map: &Array<f64>) -> Array<f64> {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.map(|v| (v - lo) / (hi - lo))
    } else {
        Array::zeros(map.shape())
    }
}
