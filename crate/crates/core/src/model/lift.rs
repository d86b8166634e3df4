use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::{Array, Chain, Graph, NodeId, ParamSet};

use super::build::Pipeline;
use super::trace::AttentionTrace;
use super::{normal, C3g, ModelConfig, ModelError};

/// Width and test switches of the feature decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Feature width `d'`; must be divisible by the head count.
    pub dim: usize,
    /// Replace norms by identities and drop the MLP branches.
    pub bypass: bool,
    /// Keep residual connections around attention and MLP.
    pub residual: bool,
}

impl FeatureConfig {
    pub fn new(dim: usize) -> Self {
        FeatureConfig {
            dim,
            bypass: false,
            residual: true,
        }
    }
}

/// Trainable value path of the feature decoder, tied to a parent model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDecoder<T> {
    pub model: ModelConfig,
    pub config: FeatureConfig,
    pub params: ParamSet<T>,
}

const COPIED: [&str; 11] = [
    "ln1.g", "ln1.b", "wv", "wo", "bo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2",
];

impl<T: Real> FeatureDecoder<T> {
    /// Value-path weights derived from a trained Gaussian decoder.
    ///
    /// With `d' = d` the value path, norms, MLPs and queries are copied;
    /// otherwise they are drawn from `N(0, 0.02)` at width `d'`. The feature
    /// head starts as the identity.
    pub fn init_from_decoder(parent: &C3g<T>, config: FeatureConfig, seed: u64) -> Result<Self, ModelError> {
        let m = &parent.config;
        let d = config.dim;
        if d == 0 || !d.is_multiple_of(m.heads) {
            return Err(ModelError::Shape(format!("feature width {d} is not divisible by {} heads", m.heads)));
        }
        let mut p = ParamSet::new();
        if d == m.dim {
            p.insert("fq", parent.params.expect("queries").clone());
            for l in 0..m.layers {
                for s in COPIED {
                    p.insert(format!("f.l{l}.{s}"), parent.params.expect(&format!("l{l}.{s}")).clone());
                }
            }
            p.insert("f.out.ln.g", parent.params.expect("out.ln.g").clone());
            p.insert("f.out.ln.b", parent.params.expect("out.ln.b").clone());
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let std = 0.02;
            p.insert("fq", normal(&mut rng, &[m.n_queries, d], std));
            for l in 0..m.layers {
                p.insert(format!("f.l{l}.ln1.g"), Array::ones(&[d]));
                p.insert(format!("f.l{l}.ln1.b"), Array::zeros(&[d]));
                p.insert(format!("f.l{l}.wv"), normal(&mut rng, &[d, d], std));
                p.insert(format!("f.l{l}.wo"), normal(&mut rng, &[d, d], std));
                p.insert(format!("f.l{l}.bo"), Array::zeros(&[d]));
                p.insert(format!("f.l{l}.ln2.g"), Array::ones(&[d]));
                p.insert(format!("f.l{l}.ln2.b"), Array::zeros(&[d]));
                p.insert(format!("f.l{l}.w1"), normal(&mut rng, &[d, 4 * d], std));
                p.insert(format!("f.l{l}.b1"), Array::zeros(&[4 * d]));
                p.insert(format!("f.l{l}.w2"), normal(&mut rng, &[4 * d, d], std));
                p.insert(format!("f.l{l}.b2"), Array::zeros(&[d]));
            }
            p.insert("f.out.ln.g", Array::ones(&[d]));
            p.insert("f.out.ln.b", Array::zeros(&[d]));
        }
        p.insert("f.head.w", Array::eye(d));
        p.insert("f.head.b", Array::zeros(&[d]));
        Ok(FeatureDecoder {
            model: m.clone(),
            config,
            params: p,
        })
    }

    pub fn cast<U: Real>(&self) -> FeatureDecoder<U> {
        FeatureDecoder {
            model: self.model.clone(),
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Lift `V x h x w x d'` per-token features to one row per Gaussian by
    /// replaying the recorded attention.
    pub fn decode_features(&self, trace: &AttentionTrace<T>, features: &Array<T>) -> Result<Array<T>, ModelError> {
        let m = &self.model;
        let want = [trace.views, trace.grid_h, trace.grid_w, self.config.dim];
        if features.shape() != want {
            return Err(ModelError::Shape(format!("features {:?} do not match trace grid {want:?}", features.shape())));
        }
        if trace.n_queries != m.n_queries || trace.layers.len() != m.layers || trace.num_heads() != m.heads {
            return Err(ModelError::Shape("trace does not come from the parent decoder".into()));
        }
        let t = trace.seq_len();
        let mut g = Graph::new();
        let mut inputs = ParamSet::new();
        let mut attn = Vec::with_capacity(m.layers);
        for (l, layer) in trace.layers.iter().enumerate() {
            let mut heads = Vec::with_capacity(layer.len());
            for (h, head) in layer.iter().enumerate() {
                let name = format!("attn.l{l}.h{h}");
                heads.push(g.input(&name, &[t, t]));
                inputs.insert(name, head.weights.clone());
            }
            attn.push(heads);
        }
        let tokens = g.input("f.tokens", &[t - m.n_queries, self.config.dim]);
        inputs.insert("f.tokens", features.clone().reshape(&[t - m.n_queries, self.config.dim])?);
        let out = value_path(&mut g, m, &self.config, tokens, &attn)?;
        let bind = Chain(&self.params, &inputs);
        let ev = g.forward(&bind)?;
        Ok(ev.value(out).clone())
    }
}

fn norm(g: &mut Graph, cfg: &FeatureConfig, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
    if cfg.bypass {
        return Ok(x);
    }
    let n = g.layer_norm(x);
    let gn = g.param(&format!("{prefix}.g"), &[cfg.dim]);
    let bn = g.param(&format!("{prefix}.b"), &[cfg.dim]);
    let y = g.mul(n, gn)?;
    Ok(g.add(y, bn)?)
}

/// Feature transformer on `[fq; tokens]` with externally supplied attention
/// weights `attn[layer][head]`; returns the `N x d'` output rows.
pub(crate) fn value_path(
    g: &mut Graph,
    m: &ModelConfig,
    cfg: &FeatureConfig,
    tokens: NodeId,
    attn: &[Vec<NodeId>],
) -> Result<NodeId, ModelError> {
    let d = cfg.dim;
    let dh = d / m.heads;
    let fq = g.param("fq", &[m.n_queries, d]);
    let mut x = g.concat(&[fq, tokens], 0)?;
    for (l, heads) in attn.iter().enumerate() {
        let h = norm(g, cfg, x, &format!("f.l{l}.ln1"))?;
        let wv = g.param(&format!("f.l{l}.wv"), &[d, d]);
        let v = g.matmul(h, wv)?;
        let mut outs = Vec::with_capacity(heads.len());
        for (hd, &a) in heads.iter().enumerate() {
            let vh = g.slice(v, 1, hd * dh, (hd + 1) * dh)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = g.concat(&outs, 1)?;
        let wo = g.param(&format!("f.l{l}.wo"), &[d, d]);
        let bo = g.param(&format!("f.l{l}.bo"), &[d]);
        let o = g.linear(o, wo, Some(bo))?;
        x = if cfg.residual { g.add(x, o)? } else { o };
        if !cfg.bypass {
            let h = norm(g, cfg, x, &format!("f.l{l}.ln2"))?;
            let w1 = g.param(&format!("f.l{l}.w1"), &[d, 4 * d]);
            let b1 = g.param(&format!("f.l{l}.b1"), &[4 * d]);
            let w2 = g.param(&format!("f.l{l}.w2"), &[4 * d, d]);
            let b2 = g.param(&format!("f.l{l}.b2"), &[d]);
            let y = g.linear(h, w1, Some(b1))?;
            let y = g.relu(y);
            let y = g.linear(y, w2, Some(b2))?;
            x = if cfg.residual { g.add(x, y)? } else { y };
        }
    }
    let rows = g.slice(x, 0, 0, m.n_queries)?;
    let rows = norm(g, cfg, rows, "f.out.ln")?;
    let hw = g.param("f.head.w", &[d, d]);
    let hb = g.param("f.head.b", &[d]);
    Ok(g.linear(rows, hw, Some(hb))?)
}

/// Gaussian pipeline extended with the feature decoder. Attention enters the
/// feature path through stop-gradients, so feature losses leave every
/// Gaussian-decoder parameter with an exactly zero gradient.
#[derive(Debug, Clone)]
pub struct FeatureGraph {
    pub pipeline: Pipeline,
    pub config: FeatureConfig,
    pub graph: Graph,
    /// `V*h*w x d'` input features, bound as `f.tokens`.
    pub tokens: NodeId,
    /// `N x d'` lifted features.
    pub output: NodeId,
}

pub fn build_feature_decoder(pipeline: &Pipeline, config: &FeatureConfig) -> Result<FeatureGraph, ModelError> {
    let m = &pipeline.config;
    if config.dim == 0 || !config.dim.is_multiple_of(m.heads) {
        return Err(ModelError::Shape(format!("feature width {} is not divisible by {} heads", config.dim, m.heads)));
    }
    let mut g = pipeline.graph.clone();
    let attn: Vec<Vec<NodeId>> = pipeline
        .attn
        .iter()
        .map(|l| l.weights.iter().map(|&a| g.detach(a)).collect())
        .collect();
    let tokens = g.input("f.tokens", &[pipeline.views * m.tokens_per_view(), config.dim]);
    let output = value_path(&mut g, m, config, tokens, &attn)?;
    g.set_output("lifted", output);
    Ok(FeatureGraph {
        pipeline: pipeline.clone(),
        config: config.clone(),
        graph: g,
        tokens,
        output,
    })
}
