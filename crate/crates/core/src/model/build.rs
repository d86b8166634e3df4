use crate::real::Real;
use crate::splat::GaussianSet;
use crate::tensor::{Array, Evaluation, Graph, NodeId, ParamSet, TensorError};

use super::head::{head_to_gaussians, RAW_WIDTH};
use super::trace::{AttentionTrace, HeadTrace};
use super::{C3g, ModelConfig, ModelError};

/// Node handles of one decoder layer's attention.
#[derive(Debug, Clone)]
pub struct AttnNodes {
    pub weights: Vec<NodeId>,
    pub q: Vec<NodeId>,
    pub k: Vec<NodeId>,
}

/// Encoder plus decoder, built for a fixed number of input views.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub views: usize,
    pub graph: Graph,
    /// `V*h*w x d` encoder tokens.
    pub features: NodeId,
    /// `N x 14` head output.
    pub raw: NodeId,
    pub(crate) attn: Vec<AttnNodes>,
}

/// Output of one decode.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    pub raw: Array<T>,
    pub gaussians: GaussianSet<T>,
    pub trace: AttentionTrace<T>,
}

fn affine_norm(g: &mut Graph, x: NodeId, gain: &str, bias: &str, d: usize) -> Result<NodeId, TensorError> {
    let n = g.layer_norm(x);
    let gn = g.param(gain, &[d]);
    let bn = g.param(bias, &[d]);
    let y = g.mul(n, gn)?;
    g.add(y, bn)
}

/// Patch tokens with positional and view embeddings: `V*h*w x d`.
pub fn build_encoder(g: &mut Graph, cfg: &ModelConfig, views: usize) -> Result<NodeId, ModelError> {
    if views == 0 || views > cfg.v_max {
        return Err(ModelError::Shape(format!("{views} views, model supports 1..={}", cfg.v_max)));
    }
    let (d, hw) = (cfg.dim, cfg.tokens_per_view());
    let patches = g.input("patches", &[views * hw, cfg.patch_width()]);
    let onehot = g.input("view_onehot", &[views * hw, cfg.v_max]);
    let w = g.param("enc.w", &[cfg.patch_width(), d]);
    let b = g.param("enc.b", &[d]);
    let x = g.linear(patches, w, Some(b))?;
    let x = g.reshape(x, &[views, hw, d])?;
    let pos = g.param("enc.pos", &[hw, d]);
    let x = g.add(x, pos)?;
    let x = g.reshape(x, &[views * hw, d])?;
    let view = g.param("enc.view", &[cfg.v_max, d]);
    let ve = g.matmul(onehot, view)?;
    Ok(g.add(x, ve)?)
}

/// Queries concatenated with `tokens`, `L` pre-norm blocks, head on the query rows.
pub fn build_decoder(g: &mut Graph, cfg: &ModelConfig, tokens: NodeId) -> Result<(NodeId, Vec<AttnNodes>), ModelError> {
    let (d, n, heads, dh) = (cfg.dim, cfg.n_queries, cfg.heads, cfg.head_dim());
    let q0 = g.param("queries", &[n, d]);
    let mut x = g.concat(&[q0, tokens], 0)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let h = affine_norm(g, x, &format!("l{l}.ln1.g"), &format!("l{l}.ln1.b"), d)?;
        let wq = g.param(&format!("l{l}.wq"), &[d, d]);
        let wk = g.param(&format!("l{l}.wk"), &[d, d]);
        let wv = g.param(&format!("l{l}.wv"), &[d, d]);
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let mut nodes = AttnNodes {
            weights: Vec::new(),
            q: Vec::new(),
            k: Vec::new(),
        };
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice(q, 1, s, e)?;
            let kh = g.slice(k, 1, s, e)?;
            let vh = g.slice(v, 1, s, e)?;
            let logits = g.matmul_nt(qh, kh)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax(logits);
            outs.push(g.matmul(a, vh)?);
            nodes.weights.push(a);
            nodes.q.push(qh);
            nodes.k.push(kh);
        }
        attn.push(nodes);
        let o = g.concat(&outs, 1)?;
        let wo = g.param(&format!("l{l}.wo"), &[d, d]);
        let bo = g.param(&format!("l{l}.bo"), &[d]);
        let o = g.linear(o, wo, Some(bo))?;
        x = g.add(x, o)?;
        let h = affine_norm(g, x, &format!("l{l}.ln2.g"), &format!("l{l}.ln2.b"), d)?;
        let w1 = g.param(&format!("l{l}.w1"), &[d, 4 * d]);
        let b1 = g.param(&format!("l{l}.b1"), &[4 * d]);
        let w2 = g.param(&format!("l{l}.w2"), &[4 * d, d]);
        let b2 = g.param(&format!("l{l}.b2"), &[d]);
        let m = g.linear(h, w1, Some(b1))?;
        let m = g.relu(m);
        let m = g.linear(m, w2, Some(b2))?;
        x = g.add(x, m)?;
    }
    let qrows = g.slice(x, 0, 0, n)?;
    let qrows = affine_norm(g, qrows, "out.ln.g", "out.ln.b", d)?;
    let hw = g.param("head.w", &[d, RAW_WIDTH]);
    let hb = g.param("head.b", &[RAW_WIDTH]);
    let raw = g.linear(qrows, hw, Some(hb))?;
    Ok((raw, attn))
}

/// Full image-to-Gaussians graph for `views` inputs.
pub fn build_pipeline(cfg: &ModelConfig, views: usize) -> Result<Pipeline, ModelError> {
    cfg.validate()?;
    let mut graph = Graph::new();
    let features = build_encoder(&mut graph, cfg, views)?;
    let (raw, attn) = build_decoder(&mut graph, cfg, features)?;
    graph.set_output("raw", raw);
    graph.set_output("features", features);
    Ok(Pipeline {
        config: cfg.clone(),
        views,
        graph,
        features,
        raw,
        attn,
    })
}

/// Patch matrix and view one-hots for `H x W x 3` images.
pub fn view_inputs<T: Real>(cfg: &ModelConfig, images: &[&Array<f32>]) -> Result<ParamSet<T>, ModelError> {
    let (h, w) = cfg.image_size();
    let p = cfg.patch;
    let (gh, gw) = (cfg.grid_h, cfg.grid_w);
    let pw = cfg.patch_width();
    let mut patches = Vec::with_capacity(images.len() * gh * gw * pw);
    for img in images {
        if img.shape() != [h, w, 3] {
            return Err(ModelError::Shape(format!(
                "image {:?} does not match the {h}x{w} grid of {p}-pixel patches",
                img.shape()
            )));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = gy * p + py;
                    let start = (row * w + gx * p) * 3;
                    patches.extend(img.data()[start..start + p * 3].iter().map(|&v| T::lit(v as f64)));
                }
            }
        }
    }
    let v = images.len();
    let hw = gh * gw;
    let onehot = Array::from_fn(&[v * hw, cfg.v_max], |i| {
        if i % cfg.v_max == (i / cfg.v_max) / hw {
            T::one()
        } else {
            T::zero()
        }
    });
    let mut set = ParamSet::new();
    set.insert("patches", Array::new(&[v * hw, pw], patches)?);
    set.insert("view_onehot", onehot);
    Ok(set)
}

impl Pipeline {
    pub(crate) fn trace_from<T: Real>(&self, ev: &Evaluation<'_, T>) -> AttentionTrace<T> {
        AttentionTrace {
            n_queries: self.config.n_queries,
            views: self.views,
            grid_h: self.config.grid_h,
            grid_w: self.config.grid_w,
            layers: self
                .attn
                .iter()
                .map(|l| {
                    (0..l.weights.len())
                        .map(|h| HeadTrace {
                            weights: ev.value(l.weights[h]).clone(),
                            q: ev.value(l.q[h]).clone(),
                            k: ev.value(l.k[h]).clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Decode Gaussians and the attention trace from input images.
    pub fn decode<T: Real>(&self, model: &C3g<T>, images: &[&Array<f32>]) -> Result<Decoded<T>, ModelError> {
        if images.len() != self.views {
            return Err(ModelError::Shape(format!("pipeline expects {} views, got {}", self.views, images.len())));
        }
        let inputs = view_inputs::<T>(&self.config, images)?;
        let chain = crate::tensor::Chain(&model.params, &inputs);
        let ev = self.graph.forward(&chain)?;
        let raw = ev.value(self.raw).clone();
        Ok(Decoded {
            gaussians: head_to_gaussians(&raw, &self.config.position_bounds())?,
            trace: self.trace_from(&ev),
            raw,
        })
    }

    /// Encoder output reshaped to `V x h x w x d`.
    pub fn encode<T: Real>(&self, model: &C3g<T>, images: &[&Array<f32>]) -> Result<Array<T>, ModelError> {
        let inputs = view_inputs::<T>(&self.config, images)?;
        let chain = crate::tensor::Chain(&model.params, &inputs);
        let ev = self.graph.forward(&chain)?;
        let c = &self.config;
        Ok(ev.value(self.features).clone().reshape(&[self.views, c.grid_h, c.grid_w, c.dim])?)
    }
}
