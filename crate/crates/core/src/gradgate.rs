//! Finite-difference gates for the hand-written derivatives.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    activated_row, build_decoder, gaussian_head_activate, gaussian_head_vjp, head_backward, head_to_gaussians,
    ModelConfig, ModelError, PositionBounds, RAW_WIDTH,
};
use crate::splat::{
    rasterize_backward, rasterize_forward, Camera, Channels, GaussianSet, RasterConfig, RenderGrads, RenderOutput,
    SplatError, ALPHA_MAX, ALPHA_MIN,
};
use crate::tensor::{finite_diff_check, Array, Graph, NodeId, ParamSet, TensorError};

const SEED_RNG: u64 = 0x5eed;

/// Largest relative error any gate may report.
pub const GATE_TOLERANCE: f64 = 1e-4;

/// Central-difference step used by every gate.
pub const GATE_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Worst relative error of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    pub name: String,
    pub error: f64,
}

impl GateResult {
    pub fn passed(&self) -> bool {
        self.error < GATE_TOLERANCE
    }
}

fn random_params(g: &Graph, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, id) in g.trainable_leaves() {
        p.insert(name, Array::from_fn(g.shape(id), |_| rng.random_range(lo..hi)));
    }
    p
}

fn unary_case(name: &str, shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>) -> (String, Graph, NodeId, f64, f64) {
    let mut g = Graph::new();
    let x = g.param("x", shape);
    let y = f(&mut g, x).expect("well-shaped case");
    (name.to_string(), g, y, lo, hi)
}

fn binary_case(
    name: &str,
    a: &[usize],
    b: &[usize],
    f: impl Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId, TensorError>,
) -> (String, Graph, NodeId, f64, f64) {
    let mut g = Graph::new();
    let x = g.param("a", a);
    let y = g.param("b", b);
    let out = f(&mut g, x, y).expect("well-shaped case");
    (name.to_string(), g, out, -1.0, 1.0)
}

/// One small graph per autodiff primitive, each checked on random inputs.
///
/// Inputs of `log` are kept positive and those of `relu` away from the kink
/// only by chance; the fixed seed makes the draw reproducible.
pub fn primitive_gates(seed: u64) -> Result<Vec<GateResult>, GateError> {
    let cases = vec![
        binary_case("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b)),
        binary_case("add_broadcast", &[3, 4], &[4], |g, a, b| g.add(a, b)),
        binary_case("sub", &[3, 4], &[3, 4], |g, a, b| g.sub(a, b)),
        binary_case("mul", &[3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
        binary_case("mul_broadcast", &[2, 3, 4], &[4], |g, a, b| g.mul(a, b)),
        binary_case("matmul", &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b)),
        binary_case("matmul_nt", &[3, 4], &[5, 4], |g, a, b| g.matmul_nt(a, b)),
        binary_case("concat_rows", &[2, 4], &[3, 4], |g, a, b| g.concat(&[a, b], 0)),
        binary_case("concat_cols", &[3, 2], &[3, 4], |g, a, b| g.concat(&[a, b], 1)),
        binary_case("cosine", &[3, 5], &[3, 5], |g, a, b| g.cosine(a, b)),
        unary_case("transpose", &[3, 5], -1.0, 1.0, |g, x| g.transpose(x)),
        unary_case("slice", &[4, 6], -1.0, 1.0, |g, x| g.slice(x, 1, 1, 4)),
        unary_case("reshape", &[4, 6], -1.0, 1.0, |g, x| g.reshape(x, &[2, 12])),
        unary_case("softmax", &[3, 6], -2.0, 2.0, |g, x| Ok(g.softmax(x))),
        unary_case("layer_norm", &[3, 6], -2.0, 2.0, |g, x| Ok(g.layer_norm(x))),
        unary_case("relu", &[4, 5], -1.0, 1.0, |g, x| Ok(g.relu(x))),
        unary_case("sigmoid", &[4, 5], -3.0, 3.0, |g, x| Ok(g.sigmoid(x))),
        unary_case("tanh", &[4, 5], -2.0, 2.0, |g, x| Ok(g.tanh(x))),
        unary_case("exp", &[4, 5], -2.0, 2.0, |g, x| Ok(g.exp(x))),
        unary_case("log", &[4, 5], 0.2, 3.0, |g, x| Ok(g.log(x))),
        unary_case("sum", &[4, 5], -1.0, 1.0, |g, x| Ok(g.sum(x))),
        unary_case("mean", &[4, 5], -1.0, 1.0, |g, x| Ok(g.mean(x))),
        unary_case("broadcast", &[5], -1.0, 1.0, |g, x| g.broadcast(x, &[3, 5])),
        unary_case("scale", &[4, 5], -1.0, 1.0, |g, x| Ok(g.scale(x, -2.5))),
        unary_case("l2_norm", &[4, 5], -1.0, 1.0, |g, x| Ok(g.l2_norm(x))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, g, y, lo, hi) in cases {
        let p = random_params(&g, &mut rng, lo, hi);
        let error = finite_diff_check(&g, y, &p, GATE_EPS)?;
        out.push(GateResult { name, error });
    }
    out.push(detach_gate(&mut rng)?);
    Ok(out)
}

/// Stop-gradient breaks finite differences by design, so `x * detach(x)` is
/// compared with its closed-form gradient `detach(x) * seed`.
fn detach_gate(rng: &mut ChaCha8Rng) -> Result<GateResult, GateError> {
    let mut g = Graph::new();
    let x = g.param("x", &[4, 5]);
    let d = g.detach(x);
    let y = g.mul(x, d)?;
    let p = random_params(&g, rng, -1.0, 1.0);
    let seed = Array::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
    let grads = g.forward(&p)?.backward(&g, &[(y, &seed)])?;
    let xv = p.expect("x");
    let error = grads
        .get("x")
        .expect("trainable leaf")
        .data()
        .iter()
        .zip(xv.data().iter().zip(seed.data()))
        .map(|(&a, (&xi, &s))| rel_error(a, xi * s))
        .fold(0.0, f64::max);
    Ok(GateResult {
        name: "detach".into(),
        error,
    })
}

/// Full decoder layer (attention, MLP, norms, head) on a tiny configuration.
pub fn transformer_gate(seed: u64) -> Result<GateResult, GateError> {
    let cfg = ModelConfig {
        n_queries: 3,
        dim: 8,
        layers: 1,
        heads: 2,
        ..ModelConfig::default()
    };
    let mut g = Graph::new();
    let tokens = g.param("tokens", &[5, cfg.dim]);
    let (raw, _) = build_decoder(&mut g, &cfg, tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_params(&g, &mut rng, -0.5, 0.5);
    Ok(GateResult {
        name: "transformer_layer".into(),
        error: finite_diff_check(&g, raw, &p, GATE_EPS)?,
    })
}

fn random_head_row(rng: &mut ChaCha8Rng) -> [f64; RAW_WIDTH] {
    let mut r = [0.0; RAW_WIDTH];
    for (k, v) in r.iter_mut().enumerate() {
        *v = match k {
            3..=5 => rng.random_range(-3.0..1.0),
            6..=9 => rng.random_range(0.3..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            _ => rng.random_range(-1.5..1.5),
        };
    }
    r
}

/// Head row to render-space Gaussian, checked through [`gaussian_head_vjp`].
pub fn activation_gate(seed: u64, rows: usize) -> Result<GateResult, GateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = PositionBounds {
        center: [0.2, -0.1, 3.0],
        half: 2.0,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..rows {
        let raw = random_head_row(&mut rng);
        let cot: [f64; RAW_WIDTH] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let f = |r: &[f64]| -> Result<f64, ModelError> {
            let a = activated_row(&gaussian_head_activate(r, &bounds)?);
            Ok(a.iter().zip(&cot).map(|(x, c)| x * c).sum())
        };
        let analytic = gaussian_head_vjp(&raw, &bounds, &cot);
        for k in 0..RAW_WIDTH {
            let (mut p, mut m) = (raw, raw);
            p[k] += GATE_EPS;
            m[k] -= GATE_EPS;
            let numeric = (f(&p)? - f(&m)?) / (2.0 * GATE_EPS);
            worst = worst.max(rel_error(analytic[k], numeric));
        }
    }
    Ok(GateResult {
        name: "activation_chain".into(),
        error: worst,
    })
}

/// Head output through activation and rasterization, pulled back by
/// [`rasterize_backward`] and [`head_backward`].
pub fn head_raster_gate(seed: u64) -> Result<GateResult, GateError> {
    let (g, cam, _) = micro_scene(seed, 4, 16);
    let cfg = RasterConfig::new(0.3, Channels::COLOR);
    let bounds = PositionBounds {
        center: [0.0, 0.0, 0.0],
        half: 4.0,
    };
    let mut raw = Array::<f64>::zeros(&[g.len(), RAW_WIDTH]);
    for (i, row) in raw.data_mut().chunks_exact_mut(RAW_WIDTH).enumerate() {
        for k in 0..3 {
            row[k] = (g.positions[i][k] / bounds.half).atanh();
            row[3 + k] = g.log_scales[i][k];
            row[11 + k] = g.color_logits[i][k];
        }
        row[6..10].copy_from_slice(&g.rotations[i]);
        row[10] = g.opacity_logits[i];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_RNG);
    let base = rasterize_forward(&head_to_gaussians(&raw, &bounds)?, &cam, &cfg)?;
    let seeds = RenderGrads {
        color: random_like(&mut rng, &base.color),
        alpha: random_like(&mut rng, &Some(base.alpha.clone())),
        ..Default::default()
    };
    let objective = |r: &Array<f64>| -> Result<f64, GateError> {
        let out = rasterize_forward(&head_to_gaussians(r, &bounds)?, &cam, &cfg)?;
        Ok(dot(&out.color, &seeds.color) + dot(&Some(out.alpha), &seeds.alpha))
    };
    let grads = rasterize_backward(&head_to_gaussians(&raw, &bounds)?, &cam, &cfg, &seeds)?;
    let analytic = head_backward(&raw, &bounds, &grads);
    let mut worst: f64 = 0.0;
    for j in 0..raw.len() {
        let mut p = raw.clone();
        p.data_mut()[j] += GATE_EPS;
        let mut m = raw.clone();
        m.data_mut()[j] -= GATE_EPS;
        let numeric = (objective(&p)? - objective(&m)?) / (2.0 * GATE_EPS);
        worst = worst.max(rel_error(analytic.data()[j], numeric));
    }
    Ok(GateResult {
        name: "head_to_render".into(),
        error: worst,
    })
}

/// Rasterizer gate over `count` micro-scenes of 1 to 8 Gaussians at 16x16.
pub fn raster_gates(seed: u64, count: usize) -> Result<Vec<GateResult>, GateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(1..=8);
            let (g, cam, cfg) = micro_scene(seed.wrapping_add(i as u64), n, 16);
            Ok(GateResult {
                name: format!("raster_scene_{i:02}_n{n}"),
                error: raster_fd_check(&g, &cam, &cfg, GATE_EPS)?,
            })
        })
        .collect()
}

/// Every gate: primitives, the transformer layer, the activation chain and
/// `scenes` rasterizer micro-scenes.
pub fn run_all(seed: u64, scenes: usize) -> Result<Vec<GateResult>, GateError> {
    let mut out = primitive_gates(seed)?;
    out.push(transformer_gate(seed)?);
    out.push(activation_gate(seed, 32)?);
    out.push(head_raster_gate(seed)?);
    out.extend(raster_gates(seed, scenes)?);
    Ok(out)
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn random_like(rng: &mut ChaCha8Rng, a: &Option<Array<f64>>) -> Option<Array<f64>> {
    a.as_ref().map(|a| Array::from_fn(a.shape(), |_| rng.random_range(-1.0..1.0)))
}

fn dot(a: &Option<Array<f64>>, b: &Option<Array<f64>>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum(),
        _ => 0.0,
    }
}

/// Central-difference check of [`rasterize_backward`] over every raw
/// Gaussian parameter and the six camera increment coordinates.
pub fn raster_fd_check(g: &GaussianSet<f64>, cam: &Camera, cfg: &RasterConfig, eps: f64) -> Result<f64, SplatError> {
    assert!(eps > 0.0 && eps <= 1e-3, "eps must lie in (0, 1e-3]");
    let base = rasterize_forward(g, cam, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_RNG);
    let seeds = RenderGrads {
        color: random_like(&mut rng, &base.color),
        features: random_like(&mut rng, &base.features),
        alpha: random_like(&mut rng, &Some(base.alpha.clone())),
        depth: random_like(&mut rng, &base.depth),
    };
    let objective = |r: &RenderOutput<f64>| {
        dot(&r.color, &seeds.color)
            + dot(&r.features, &seeds.features)
            + dot(&Some(r.alpha.clone()), &seeds.alpha)
            + dot(&r.depth, &seeds.depth)
    };
    let grads = rasterize_backward(g, cam, cfg, &seeds)?;

    let mut worst: f64 = 0.0;
    let mut probe = |analytic: f64, edit: &dyn Fn(&mut GaussianSet<f64>, f64)| -> Result<(), SplatError> {
        let mut gp = g.clone();
        edit(&mut gp, eps);
        let plus = objective(&rasterize_forward(&gp, cam, cfg)?);
        let mut gm = g.clone();
        edit(&mut gm, -eps);
        let minus = objective(&rasterize_forward(&gm, cam, cfg)?);
        worst = worst.max(rel_error(analytic, (plus - minus) / (2.0 * eps)));
        Ok(())
    };
    for i in 0..g.len() {
        for k in 0..3 {
            probe(grads.positions[i][k], &|s, e| s.positions[i][k] += e)?;
            probe(grads.log_scales[i][k], &|s, e| s.log_scales[i][k] += e)?;
            if cfg.channels.color {
                probe(grads.color_logits[i][k], &|s, e| s.color_logits[i][k] += e)?;
            }
        }
        for k in 0..4 {
            probe(grads.rotations[i][k], &|s, e| s.rotations[i][k] += e)?;
        }
        probe(grads.opacity_logits[i], &|s, e| s.opacity_logits[i] += e)?;
        if cfg.channels.features {
            for k in 0..g.feature_dim {
                let j = i * g.feature_dim + k;
                probe(grads.features[j], &|s, e| s.features[j] += e)?;
            }
        }
    }
    for k in 0..6 {
        let shifted = |e: f64| {
            let mut v = Vector3::zeros();
            v[k % 3] = e;
            if k < 3 {
                cam.perturbed(&v, &Vector3::zeros())
            } else {
                cam.perturbed(&Vector3::zeros(), &v)
            }
        };
        let plus = objective(&rasterize_forward(g, &shifted(eps), cfg)?);
        let minus = objective(&rasterize_forward(g, &shifted(-eps), cfg)?);
        worst = worst.max(rel_error(grads.camera[k], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Random scene of a few large, overlapping Gaussians on a small raster.
///
/// Every Gaussian covers the whole frame with alpha strictly between the skip
/// threshold and the clamp, and depths are well separated, so the composite
/// is smooth in every parameter.
pub fn micro_scene(seed: u64, count: usize, size: usize) -> (GaussianSet<f64>, Camera, RasterConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = size as f64;
    let cam = Camera::look_at(
        Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), -3.0),
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        focal,
    );
    let feature_dim = 3;
    let s = if rng.random_bool(0.5) { 0.3 } else { 3.0 };
    let channels = Channels::ALL;
    loop {
        let mut g = GaussianSet::default();
        for _ in 0..count {
            let z = rng.random_range(-1.0..1.0);
            let depth = 3.0 + z;
            // Means project within a few pixels of the image center.
            let spread = 3.0 * depth / focal;
            g.push(
                [rng.random_range(-spread..spread), rng.random_range(-spread..spread), z],
                std::array::from_fn(|_| (rng.random_range(10.0..20.0) * depth / focal).ln()),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                rng.random_range(-1.5..1.5),
                std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            );
        }
        let feats = Array::from_fn(&[count, feature_dim], |_| rng.random_range(-1.0..1.0));
        g.set_features(&feats).expect("feature block matches count");
        let cfg = RasterConfig {
            s,
            background: [0.1, 0.2, 0.3],
            channels,
        };
        if smooth_everywhere(&g, &cam, &cfg) {
            return (g, cam, cfg);
        }
    }
}

fn smooth_everywhere(g: &GaussianSet<f64>, cam: &Camera, cfg: &RasterConfig) -> bool {
    let mut depths: Vec<f64> = g.positions.iter().map(|p| cam.to_camera(&Vector3::from(*p)).z).collect();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if depths.windows(2).any(|w| w[1] - w[0] < 1e-2) {
        return false;
    }
    if g.rotations.iter().any(|q| q.iter().map(|v| v * v).sum::<f64>() < 0.1) {
        return false;
    }
    // Each Gaussian alone: its alpha map must stay well inside (1/255, 0.999).
    (0..g.len()).all(|i| {
        let single = g.select(&[i]);
        let cfg1 = RasterConfig {
            background: [0.0; 3],
            channels: Channels::COLOR,
            ..cfg.clone()
        };
        let Ok(r) = rasterize_forward(&single, cam, &cfg1) else {
            return false;
        };
        r.alpha
            .data()
            .iter()
            .all(|&a| a > ALPHA_MIN * 2.0 && a < ALPHA_MAX - 0.05)
    })
}
