use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::psnr;
use crate::model::{build_pipeline, decay_exempt, head_backward, head_to_gaussians, save_c3g, view_inputs, C3g, Pipeline};
use crate::scene::io::write_atomic;
use crate::splat::{rasterize_backward, rasterize_forward, Channels, RasterConfig, RenderGrads};
use crate::tensor::{Array, Chain, TensorError};

use super::config::TrainConfig;
use super::data::{draw_sample, Sample, TrainScene};
use super::optim::{AdamW, StepOutcome};
use super::schedule::{cosine_lr, lowpass_schedule};
use super::{photometric_loss, TrainError};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Absent for feature training.
    pub psnr: Option<f64>,
    pub s: f64,
    pub lr: f64,
}

impl LogRow {
    /// `step loss psnr s lr`, space separated.
    pub fn line(&self) -> String {
        let psnr = self.psnr.map_or("-".to_string(), |p| format!("{p:.6}"));
        format!("{} {:.9e} {psnr} {} {:.9e}", self.step, self.loss, self.s, self.lr)
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = String::from("step loss psnr s lr\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.line());
    }
    out
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun<M> {
    pub model: M,
    pub log: Vec<LogRow>,
    /// Steps dropped because a gradient was non-finite.
    pub skipped: Vec<(usize, String)>,
    /// Final checkpoint path and content hash when an output directory was given.
    pub checkpoint: Option<(PathBuf, String)>,
}

/// Run `f` on one worker thread when `deterministic`, else on the global pool.
pub(crate) fn in_pool<R: Send>(deterministic: bool, f: impl FnOnce() -> R + Send) -> Result<R, TrainError> {
    if !deterministic {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub(crate) fn non_finite(e: TensorError, step: usize, scene: usize) -> TrainError {
    match e {
        TensorError::NonFinite { .. } => TrainError::NonFinite { step, scene },
        other => other.into(),
    }
}

/// Loss, PSNR and parameter gradients of one sample.
pub(crate) struct SampleGrads {
    pub loss: f64,
    pub psnr: f64,
    pub grads: Vec<(String, Array<f32>)>,
}

pub(crate) fn sample_grads(
    pipe: &Pipeline,
    model: &C3g<f32>,
    scenes: &[TrainScene],
    sample: &Sample,
    raster: &RasterConfig,
    lambda_mse: f64,
    step: usize,
) -> Result<SampleGrads, TrainError> {
    let sc = &scenes[sample.scene];
    let images: Vec<&Array<f32>> = sample.inputs.iter().map(|&i| &sc.views[i].image).collect();
    let inputs = view_inputs::<f32>(&model.config, &images)?;
    let bind = Chain(&model.params, &inputs);
    let ev = pipe.graph.forward(&bind).map_err(|e| non_finite(e, step, sample.scene))?;
    let raw = ev.value(pipe.raw);
    let gaussians = head_to_gaussians(raw, &model.config.position_bounds())?;
    let inv = 1.0 / sample.targets.len() as f64;
    let mut draw = Array::zeros(raw.shape());
    let (mut loss, mut ps) = (0.0, 0.0);
    for &t in &sample.targets {
        let view = &sc.views[t];
        let color = rasterize_forward(&gaussians, &view.camera, raster)?.color.expect("color channel");
        let l = photometric_loss(&color, &view.image, lambda_mse)?;
        if !l.value.is_finite() {
            return Err(TrainError::NonFinite { step, scene: sample.scene });
        }
        loss += l.value * inv;
        ps += psnr(&color, &view.image)? * inv;
        let mut grad = l.grad;
        grad.data_mut().iter_mut().for_each(|g| *g *= inv as f32);
        let rg = RenderGrads {
            color: Some(grad),
            ..Default::default()
        };
        let gg = rasterize_backward(&gaussians, &view.camera, raster, &rg)?;
        let d = head_backward(raw, &model.config.position_bounds(), &gg);
        draw.data_mut().iter_mut().zip(d.data()).for_each(|(a, &b)| *a += b);
    }
    let grads = ev.backward(&pipe.graph, &[(pipe.raw, &draw)])?;
    Ok(SampleGrads {
        loss,
        psnr: ps,
        grads: grads.into_map().into_iter().collect(),
    })
}

/// Element-wise mean of per-sample gradient lists in sample order.
pub(crate) fn merge(mut parts: Vec<Vec<(String, Array<f32>)>>) -> Vec<(String, Array<f32>)> {
    let inv = 1.0 / parts.len() as f32;
    let mut acc = parts.remove(0);
    for p in parts {
        for ((_, a), (_, b)) in acc.iter_mut().zip(p) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
        }
    }
    if inv != 1.0 {
        for (_, a) in acc.iter_mut() {
            a.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
    }
    acc
}

/// Train the Gaussian decoder by rendering its prediction at target views.
///
/// With an output directory, the checkpoint `c3g.bin` is rewritten every
/// `checkpoint_every` steps and at the end, and the log goes to `train.log`.
pub fn train_c3g(
    init: C3g<f32>,
    cfg: &TrainConfig,
    scenes: &[TrainScene],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRow) + Send,
) -> Result<TrainRun<C3g<f32>>, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::Config("no training scenes".into()));
    }
    let pipe = build_pipeline(&init.config, cfg.input_views)?;
    in_pool(cfg.deterministic, move || {
        let mut model = init;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(cfg.weight_decay);
        let mut log = Vec::with_capacity(cfg.steps);
        let mut skipped = Vec::new();
        let mut checkpoint = None;
        let ckpt_path = out_dir.map(|d| d.join("c3g.bin"));
        for step in 0..cfg.steps {
            let s = lowpass_schedule(step, &cfg.lowpass);
            let raster = RasterConfig::new(s, Channels::COLOR);
            let lr = cosine_lr(step, cfg.steps, 1.0, cfg.lr_min_ratio);
            let samples = (0..cfg.batch)
                .map(|_| draw_sample(scenes, cfg.input_views, cfg.targets, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let mut parts = Vec::with_capacity(samples.len());
            let (mut loss, mut ps) = (0.0, 0.0);
            for sample in &samples {
                let r = sample_grads(&pipe, &model, scenes, sample, &raster, cfg.lambda_mse, step)?;
                loss += r.loss / samples.len() as f64;
                ps += r.psnr / samples.len() as f64;
                parts.push(r.grads);
            }
            let grads = merge(parts);
            let rate = |name: &str| {
                let base = if name.starts_with("enc.") { cfg.lr_encoder } else { cfg.lr_decoder };
                base * lr
            };
            let outcome = opt.step(
                &mut model.params,
                grads.iter().map(|(n, a)| (n.as_str(), a)),
                rate,
                |n| !decay_exempt(n),
            );
            if let StepOutcome::Skipped { param } = outcome {
                skipped.push((step, param));
            }
            let row = LogRow {
                step,
                loss,
                psnr: Some(ps),
                s,
                lr: cfg.lr_decoder * lr,
            };
            on_step(&row);
            log.push(row);
            let due = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0;
            if let (Some(path), true) = (&ckpt_path, due) {
                checkpoint = Some((path.clone(), save_c3g(path, &model)?));
            }
        }
        if let (Some(dir), Some(path)) = (out_dir, &ckpt_path) {
            checkpoint = Some((path.clone(), save_c3g(path, &model)?));
            write_atomic(&dir.join("train.log"), format_log(&log).as_bytes())?;
        }
        Ok(TrainRun {
            model,
            log,
            skipped,
            checkpoint,
        })
    })?
}
