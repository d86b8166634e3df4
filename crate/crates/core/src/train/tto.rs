use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::eval::ssim_with_grad;
use crate::real::Real;
use crate::splat::{
    quat_to_matrix, rasterize_backward, rasterize_forward, Camera, Channels, GaussianGrads, GaussianSet, RasterConfig,
    RenderGrads,
};
use crate::tensor::Array;

use super::optim::Moments;
use super::TrainError;

/// A supervising image and its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct View<T> {
    pub image: Array<T>,
    pub camera: Camera,
}

/// Per-scene refinement settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TtoConfig {
    pub steps: usize,
    pub densify_interval: usize,
    pub lr_means: f64,
    pub lr_scales: f64,
    pub lr_rotations: f64,
    pub lr_colors: f64,
    pub lr_opacity: f64,
    pub w_mse: f64,
    pub w_ssim: f64,
    /// Mean screen-space positional gradient norm that triggers densification.
    pub densify_threshold: f64,
    /// Scale (largest axis) separating clones from splits, as a fraction of `extent`.
    pub split_fraction: f64,
    /// Scene scale; multiplies `lr_means` and `split_fraction`.
    pub extent: f64,
    pub max_gaussians: usize,
    pub s: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for TtoConfig {
    fn default() -> Self {
        TtoConfig {
            steps: 1000,
            densify_interval: 100,
            lr_means: 1.6e-4,
            lr_scales: 3e-4,
            lr_rotations: 1e-3,
            lr_colors: 2.5e-3,
            lr_opacity: 5e-3,
            w_mse: 0.8,
            w_ssim: 0.2,
            densify_threshold: 2e-4,
            split_fraction: 0.01,
            extent: 1.0,
            max_gaussians: 256,
            s: 0.3,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl TtoConfig {
    pub fn validate(&self, initial: usize) -> Result<(), TrainError> {
        let lrs = [self.lr_means, self.lr_scales, self.lr_rotations, self.lr_colors, self.lr_opacity];
        if lrs.iter().any(|&v| !(v > 0.0)) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(self.extent > 0.0) {
            return Err(TrainError::Config("extent must be positive".into()));
        }
        if self.max_gaussians < initial {
            return Err(TrainError::Config(format!(
                "budget {} is below the initial count {initial}",
                self.max_gaussians
            )));
        }
        Ok(())
    }

    fn raster(&self) -> RasterConfig {
        RasterConfig {
            s: self.s,
            background: self.background,
            channels: Channels::COLOR,
        }
    }
}

/// Scene scale of a camera set: 1.1 times the largest distance of a camera
/// center from their mean.
pub fn camera_extent(cameras: &[&Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<nalgebra::Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    1.1 * radius.max(f64::EPSILON)
}

/// Adam moments for every attribute block of a Gaussian set.
#[derive(Debug, Clone)]
pub struct GaussianAdam<T> {
    positions: Moments<T>,
    log_scales: Moments<T>,
    rotations: Moments<T>,
    opacity: Moments<T>,
    colors: Moments<T>,
    step: u64,
}

fn flat_mut<T, const K: usize>(v: &mut [[T; K]]) -> &mut [T] {
    v.as_flattened_mut()
}

impl<T: Real> GaussianAdam<T> {
    pub fn new(n: usize) -> Self {
        GaussianAdam {
            positions: Moments::new(3 * n),
            log_scales: Moments::new(3 * n),
            rotations: Moments::new(4 * n),
            opacity: Moments::new(n),
            colors: Moments::new(3 * n),
            step: 0,
        }
    }

    /// Moments following a reindexing of the set.
    pub fn select(&self, rows: &[usize]) -> Self {
        GaussianAdam {
            positions: self.positions.select(rows, 3),
            log_scales: self.log_scales.select(rows, 3),
            rotations: self.rotations.select(rows, 4),
            opacity: self.opacity.select(rows, 1),
            colors: self.colors.select(rows, 3),
            step: self.step,
        }
    }

    pub fn apply(&mut self, g: &mut GaussianSet<T>, grads: &GaussianGrads<T>, cfg: &TtoConfig) {
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (0.9, 0.999, 1e-15);
        self.positions
            .update(flat_mut(&mut g.positions), grads.positions.as_flattened(), t, cfg.lr_means * cfg.extent, b1, b2, eps, 0.0);
        self.log_scales
            .update(flat_mut(&mut g.log_scales), grads.log_scales.as_flattened(), t, cfg.lr_scales, b1, b2, eps, 0.0);
        self.rotations
            .update(flat_mut(&mut g.rotations), grads.rotations.as_flattened(), t, cfg.lr_rotations, b1, b2, eps, 0.0);
        self.opacity
            .update(&mut g.opacity_logits, &grads.opacity_logits, t, cfg.lr_opacity, b1, b2, eps, 0.0);
        self.colors
            .update(flat_mut(&mut g.color_logits), grads.color_logits.as_flattened(), t, cfg.lr_colors, b1, b2, eps, 0.0);
    }
}

/// `w_mse * MSE + w_ssim * (1 - SSIM)` of one view, with raw-parameter gradients.
pub fn view_loss<T: Real>(
    g: &GaussianSet<T>,
    view: &View<T>,
    raster: &RasterConfig,
    w_mse: f64,
    w_ssim: f64,
) -> Result<(f64, GaussianGrads<T>), TrainError> {
    let out = rasterize_forward(g, &view.camera, raster)?;
    let color = out.color.expect("color channel requested");
    let mse = super::photometric_loss(&color, &view.image, w_mse)?;
    let mut grad = mse.grad;
    let mut value = mse.value;
    if w_ssim != 0.0 {
        let (s, sg) = ssim_with_grad(&color, &view.image)?;
        value += w_ssim * (1.0 - s);
        let w = T::lit(w_ssim);
        grad.data_mut().iter_mut().zip(sg.data()).for_each(|(a, &b)| *a -= w * b);
    }
    let rg = RenderGrads {
        color: Some(grad),
        ..Default::default()
    };
    Ok((value, rasterize_backward(g, &view.camera, raster, &rg)?))
}

/// Mean loss over `views` and the summed-then-averaged gradients.
pub fn multi_view_loss<T: Real>(
    g: &GaussianSet<T>,
    views: &[View<T>],
    raster: &RasterConfig,
    w_mse: f64,
    w_ssim: f64,
) -> Result<(f64, GaussianGrads<T>), TrainError> {
    let inv = 1.0 / views.len().max(1) as f64;
    let mut total = 0.0;
    let mut acc: Option<GaussianGrads<T>> = None;
    for v in views {
        let (l, gr) = view_loss(g, v, raster, w_mse, w_ssim)?;
        total += l;
        match &mut acc {
            None => acc = Some(gr),
            Some(a) => add_grads(a, &gr),
        }
    }
    let mut acc = acc.ok_or_else(|| TrainError::Config("no supervising views".into()))?;
    scale_grads(&mut acc, T::lit(inv));
    Ok((total * inv, acc))
}

pub(crate) fn add_grads<T: Real>(a: &mut GaussianGrads<T>, b: &GaussianGrads<T>) {
    let add = |x: &mut [T], y: &[T]| x.iter_mut().zip(y).for_each(|(p, &q)| *p += q);
    add(a.positions.as_flattened_mut(), b.positions.as_flattened());
    add(a.log_scales.as_flattened_mut(), b.log_scales.as_flattened());
    add(a.rotations.as_flattened_mut(), b.rotations.as_flattened());
    add(&mut a.opacity_logits, &b.opacity_logits);
    add(a.color_logits.as_flattened_mut(), b.color_logits.as_flattened());
    add(&mut a.features, &b.features);
    add(&mut a.mean2d_norms, &b.mean2d_norms);
    add(&mut a.camera, &b.camera);
}

pub(crate) fn scale_grads<T: Real>(a: &mut GaussianGrads<T>, s: T) {
    let sc = |x: &mut [T]| x.iter_mut().for_each(|p| *p *= s);
    sc(a.positions.as_flattened_mut());
    sc(a.log_scales.as_flattened_mut());
    sc(a.rotations.as_flattened_mut());
    sc(&mut a.opacity_logits);
    sc(a.color_logits.as_flattened_mut());
    sc(&mut a.features);
    sc(&mut a.mean2d_norms);
    sc(&mut a.camera);
}

/// Thresholds of one densification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyConfig {
    pub threshold: f64,
    /// Largest-axis scale above which a Gaussian is split rather than cloned.
    pub split_scale: f64,
    pub max_gaussians: usize,
}

/// What a densification pass did.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyOutcome<T> {
    pub gaussians: GaussianSet<T>,
    /// Source index of every output Gaussian.
    pub origin: Vec<usize>,
    pub cloned: usize,
    pub split: usize,
    /// True when the budget stopped the pass early.
    pub capped: bool,
}

/// Clone small and split large Gaussians whose mean screen-space gradient
/// norm exceeds the threshold. Candidates are taken in decreasing gradient
/// order until the budget is reached. Split children are drawn from the
/// parent and shrink by 1.6; the parent is removed.
pub fn densify<T: Real>(
    g: &GaussianSet<T>,
    grad_stats: &[f64],
    cfg: &DensifyConfig,
    rng: &mut ChaCha8Rng,
) -> DensifyOutcome<T> {
    assert_eq!(grad_stats.len(), g.len());
    let mut cand: Vec<usize> = (0..g.len()).filter(|&i| grad_stats[i] > cfg.threshold).collect();
    cand.sort_by(|&a, &b| grad_stats[b].total_cmp(&grad_stats[a]).then(a.cmp(&b)));
    let mut is_split = vec![false; g.len()];
    let mut is_clone = vec![false; g.len()];
    let mut count = g.len();
    let mut capped = false;
    for &i in &cand {
        if count >= cfg.max_gaussians {
            capped = true;
            break;
        }
        let largest = g.log_scales[i].iter().map(|v| v.as_f64().exp()).fold(0.0, f64::max);
        if largest > cfg.split_scale {
            is_split[i] = true;
        } else {
            is_clone[i] = true;
        }
        count += 1;
    }
    let shrink = T::lit(1.6f64.ln());
    let mut out = g.select(&(0..g.len()).filter(|&i| !is_split[i]).collect::<Vec<_>>());
    let mut origin: Vec<usize> = (0..g.len()).filter(|&i| !is_split[i]).collect();
    for i in 0..g.len() {
        if is_clone[i] {
            push_from(&mut out, g, i);
            origin.push(i);
        }
    }
    for i in 0..g.len() {
        if !is_split[i] {
            continue;
        }
        let a = g.activate(i);
        let r = quat_to_matrix(a.rotation);
        for _ in 0..2 {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let local: [f64; 3] = std::array::from_fn(|k| z[k] * a.scale[k].as_f64());
            let pos: [T; 3] = std::array::from_fn(|row| {
                let off: f64 = (0..3).map(|k| r[row][k].as_f64() * local[k]).sum();
                a.mean[row] + T::lit(off)
            });
            let mut child = g.select(&[i]);
            child.positions[0] = pos;
            child.log_scales[0] = child.log_scales[0].map(|v| v - shrink);
            push_from(&mut out, &child, 0);
            origin.push(i);
        }
    }
    DensifyOutcome {
        gaussians: out,
        origin,
        cloned: is_clone.iter().filter(|&&b| b).count(),
        split: is_split.iter().filter(|&&b| b).count(),
        capped,
    }
}

fn push_from<T: Real>(out: &mut GaussianSet<T>, src: &GaussianSet<T>, i: usize) {
    out.positions.push(src.positions[i]);
    out.log_scales.push(src.log_scales[i]);
    out.rotations.push(src.rotations[i]);
    out.opacity_logits.push(src.opacity_logits[i]);
    out.color_logits.push(src.color_logits[i]);
    out.features.extend_from_slice(src.feature(i));
}

/// Outcome of test-time optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct TtoResult<T> {
    pub gaussians: GaussianSet<T>,
    /// Mean loss before each step.
    pub losses: Vec<f64>,
    pub densify_events: usize,
}

/// Adam refinement of every Gaussian attribute against the given views,
/// with periodic densification and a fixed low-pass `s`.
pub fn tto_optimize<T: Real>(g: &GaussianSet<T>, views: &[View<T>], cfg: &TtoConfig) -> Result<TtoResult<T>, TrainError> {
    cfg.validate(g.len())?;
    let raster = cfg.raster();
    let mut g = g.clone();
    let mut adam = GaussianAdam::new(g.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = vec![0.0; g.len()];
    let mut seen = 0usize;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut events = 0;
    let dcfg = DensifyConfig {
        threshold: cfg.densify_threshold,
        split_scale: cfg.split_fraction * cfg.extent,
        max_gaussians: cfg.max_gaussians,
    };
    for step in 0..cfg.steps {
        let (loss, grads) = multi_view_loss(&g, views, &raster, cfg.w_mse, cfg.w_ssim)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, scene: 0 });
        }
        losses.push(loss);
        stats.iter_mut().zip(&grads.mean2d_norms).for_each(|(s, v)| *s += v.as_f64());
        seen += 1;
        adam.apply(&mut g, &grads, cfg);
        let last = step + 1 == cfg.steps;
        if cfg.densify_interval > 0 && (step + 1) % cfg.densify_interval == 0 && !last && g.len() < cfg.max_gaussians {
            let mean: Vec<f64> = stats.iter().map(|s| s / seen as f64).collect();
            let out = densify(&g, &mean, &dcfg, &mut rng);
            if out.gaussians.len() != g.len() {
                events += 1;
                adam = adam.select(&out.origin);
                g = out.gaussians;
            }
            stats = vec![0.0; g.len()];
            seen = 0;
        }
    }
    Ok(TtoResult {
        gaussians: g,
        losses,
        densify_events: events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize) -> GaussianSet<f64> {
        let mut g = GaussianSet::default();
        for i in 0..n {
            let x = i as f64 * 0.3 - 0.3;
            g.push([x, 0.1 * x, 3.0], [-1.5, -1.2, -1.4], [1.0, 0.1, 0.0, 0.2], 0.5, [0.2, -0.4, x]);
        }
        g
    }

    #[test]
    fn zero_steps_return_input() {
        let g = blob(3);
        let view = View {
            image: Array::zeros(&[16, 16, 3]),
            camera: Camera::canonical(16, 16, 20.0),
        };
        let cfg = TtoConfig {
            steps: 0,
            ..Default::default()
        };
        let out = tto_optimize(&g, &[view], &cfg).unwrap();
        assert_eq!(out.gaussians, g);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn budget_below_count_is_rejected() {
        let cfg = TtoConfig {
            max_gaussians: 2,
            ..Default::default()
        };
        assert!(cfg.validate(3).is_err());
    }

    #[test]
    fn densify_below_threshold_is_identity() {
        let g = blob(4);
        let cfg = DensifyConfig {
            threshold: 1.0,
            split_scale: 0.01,
            max_gaussians: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify(&g, &[0.1, 0.2, 0.0, 0.99], &cfg, &mut rng);
        assert_eq!(out.gaussians, g);
        assert_eq!(out.origin, vec![0, 1, 2, 3]);
    }

    #[test]
    fn large_gaussian_splits_into_two_smaller() {
        let g = blob(3);
        let cfg = DensifyConfig {
            threshold: 0.5,
            split_scale: 0.01,
            max_gaussians: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify(&g, &[0.0, 0.9, 0.0], &cfg, &mut rng);
        assert_eq!(out.gaussians.len(), 4);
        assert_eq!(out.split, 1);
        assert_eq!(out.origin, vec![0, 2, 1, 1]);
        for child in 2..4 {
            for k in 0..3 {
                assert!(out.gaussians.log_scales[child][k] < g.log_scales[1][k]);
                let ratio = (g.log_scales[1][k] - out.gaussians.log_scales[child][k]).exp();
                assert!((ratio - 1.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_gaussian_is_cloned_and_budget_caps() {
        let g = blob(3);
        let cfg = DensifyConfig {
            threshold: 0.5,
            split_scale: 10.0,
            max_gaussians: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify(&g, &[0.7, 0.9, 0.8], &cfg, &mut rng);
        assert_eq!(out.gaussians.len(), 4);
        assert_eq!(out.cloned, 1);
        assert!(out.capped);
        assert_eq!(out.origin, vec![0, 1, 2, 1]);
        assert_eq!(out.gaussians.select(&[3]), g.select(&[1]));
    }
}
