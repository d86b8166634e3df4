//! Patch encoder, query-token Gaussian decoder and the replayed-attention
//! feature decoder.

mod build;
mod checkpoint;
mod head;
mod lift;
mod trace;

pub use build::{build_decoder, build_encoder, build_pipeline, view_inputs, AttnNodes, Decoded, Pipeline};
pub use checkpoint::{content_hash, load_c3g, load_c3gf, save_c3g, save_c3gf};
pub use head::{
    activated_row, gaussian_head_activate, gaussian_head_vjp, head_backward, head_to_gaussians, PositionBounds,
    LOG_SCALE_MAX, LOG_SCALE_MIN, RAW_WIDTH,
};
pub use lift::{build_feature_decoder, FeatureConfig, FeatureDecoder, FeatureGraph};
pub use trace::{attention_heatmap, attention_logit_map, AttentionTrace, HeadTrace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::real::Real;
use crate::tensor::{Array, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Splat(#[from] crate::splat::SplatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of the Gaussian decoder and its patch encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub v_max: usize,
    /// Patch grid per view; images are `grid_h * patch` by `grid_w * patch`.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Half-size of the box decoded positions are confined to.
    pub pos_scale: f64,
    /// Center of that box in the canonical frame.
    pub pos_center: [f64; 3],
    pub init_log_scale: f64,
    /// Standard deviation of the head's position weights at init.
    pub init_spread: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 64,
            dim: 64,
            layers: 2,
            heads: 4,
            patch: 16,
            v_max: 8,
            grid_h: 4,
            grid_w: 4,
            pos_scale: 2.0,
            pos_center: [0.0, 0.0, 3.2],
            init_log_scale: -2.0,
            init_spread: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Shape(m));
        if self.n_queries == 0 || self.dim == 0 || self.layers == 0 || self.patch == 0 || self.v_max == 0 {
            return bad("all sizes must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("empty patch grid".into());
        }
        if !(self.pos_scale > 0.0) || self.pos_center.iter().any(|c| !c.is_finite()) {
            return bad("position bounds need a finite center and positive size".into());
        }
        Ok(())
    }

    /// Apply one `key = value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let err = || ModelError::Config(format!("bad value `{value}` for `{key}`"));
        let u = || value.parse::<usize>().map_err(|_| err());
        let f = || value.parse::<f64>().map_err(|_| err());
        match key {
            "n_queries" => self.n_queries = u()?,
            "dim" => self.dim = u()?,
            "layers" => self.layers = u()?,
            "heads" => self.heads = u()?,
            "patch" => self.patch = u()?,
            "v_max" => self.v_max = u()?,
            "grid_h" => self.grid_h = u()?,
            "grid_w" => self.grid_w = u()?,
            "pos_scale" => self.pos_scale = f()?,
            "pos_center" => {
                let parts: Vec<f64> = value
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .map(|p| p.trim().parse::<f64>().map_err(|_| err()))
                    .collect::<Result<_, _>>()?;
                self.pos_center = parts.try_into().map_err(|_| err())?;
            }
            "init_log_scale" => self.init_log_scale = f()?,
            "init_spread" => self.init_spread = f()?,
            _ => return Err(ModelError::Config(format!("unknown key `{key}` in [model]"))),
        }
        Ok(())
    }

    pub fn position_bounds(&self) -> PositionBounds {
        PositionBounds {
            center: self.pos_center,
            half: self.pos_scale,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens_per_view(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch, self.grid_w * self.patch)
    }

    /// Sequence length for `views` input views.
    pub fn seq_len(&self, views: usize) -> usize {
        self.n_queries + views * self.tokens_per_view()
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Gaussian decoder weights together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct C3g<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

pub(crate) fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array<T> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array::from_fn(shape, |_| T::lit(n.sample(rng)))
}

impl<T: Real> C3g<T> {
    /// Fresh weights; deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n) = (config.dim, config.n_queries);
        let pw = config.patch_width();
        let mut p = ParamSet::new();
        p.insert("enc.w", normal(&mut rng, &[pw, d], 1.0 / (pw as f64).sqrt()));
        p.insert("enc.b", Array::zeros(&[d]));
        p.insert("enc.pos", normal(&mut rng, &[config.tokens_per_view(), d], 0.5));
        p.insert("enc.view", normal(&mut rng, &[config.v_max, d], 0.5));
        p.insert("queries", normal(&mut rng, &[n, d], 1.0));
        let lin = 1.0 / (d as f64).sqrt();
        let out = lin / (2.0 * config.layers as f64).sqrt();
        for l in 0..config.layers {
            p.insert(format!("l{l}.ln1.g"), Array::ones(&[d]));
            p.insert(format!("l{l}.ln1.b"), Array::zeros(&[d]));
            p.insert(format!("l{l}.wq"), normal(&mut rng, &[d, d], lin));
            p.insert(format!("l{l}.wk"), normal(&mut rng, &[d, d], lin));
            p.insert(format!("l{l}.wv"), normal(&mut rng, &[d, d], lin));
            p.insert(format!("l{l}.wo"), normal(&mut rng, &[d, d], out));
            p.insert(format!("l{l}.bo"), Array::zeros(&[d]));
            p.insert(format!("l{l}.ln2.g"), Array::ones(&[d]));
            p.insert(format!("l{l}.ln2.b"), Array::zeros(&[d]));
            p.insert(format!("l{l}.w1"), normal(&mut rng, &[d, 4 * d], lin));
            p.insert(format!("l{l}.b1"), Array::zeros(&[4 * d]));
            p.insert(format!("l{l}.w2"), normal(&mut rng, &[4 * d, d], out / 2.0));
            p.insert(format!("l{l}.b2"), Array::zeros(&[d]));
        }
        p.insert("out.ln.g", Array::ones(&[d]));
        p.insert("out.ln.b", Array::zeros(&[d]));
        let mut w = normal::<T>(&mut rng, &[d, RAW_WIDTH], 0.02);
        for r in 0..d {
            for k in 0..3 {
                w.data_mut()[r * RAW_WIDTH + k] = T::lit(normal::<f64>(&mut rng, &[1], config.init_spread).item());
            }
        }
        p.insert("head.w", w);
        let mut b = Array::zeros(&[RAW_WIDTH]);
        for k in 0..3 {
            b.data_mut()[3 + k] = T::lit(config.init_log_scale);
        }
        b.data_mut()[6] = T::one();
        p.insert("head.b", b);
        Ok(C3g { config, params: p })
    }

    pub fn cast<U: Real>(&self) -> C3g<U> {
        C3g {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Parameters exempt from weight decay: queries, normalization gains and biases.
pub fn decay_exempt(name: &str) -> bool {
    name == "queries"
        || name == "fq"
        || name.contains(".ln")
        || name.ends_with(".b")
        || name.ends_with(".bo")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
}
