use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    build_feature_decoder, build_pipeline, decay_exempt, head_to_gaussians, save_c3gf, view_inputs, C3g,
    FeatureConfig, FeatureDecoder, FeatureGraph,
};
use crate::scene::io::write_atomic;
use crate::scene::{synth_features, SyntheticScene};
use crate::splat::{rasterize_backward, rasterize_forward, Camera, Channels, RasterConfig, RenderGrads};
use crate::tensor::{Array, Chain};

use super::c3g::{format_log, in_pool, non_finite, LogRow, TrainRun};
use super::config::FeatureTrainConfig;
use super::data::{draw_sample, TrainScene};
use super::optim::{AdamW, StepOutcome};
use super::schedule::cosine_lr;
use super::{feature_loss, TrainError};

/// Seed of the feature noise for one view of one step.
pub fn noise_seed(seed: u64, step: usize, scene: usize, view: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ ((step as u64) << 24)
        ^ ((scene as u64) << 12)
        ^ view as u64
}

/// Nearest-neighbour upsampling of an `h x w x d` map by an integer factor.
pub fn upsample(map: &Array<f32>, factor: usize) -> Array<f32> {
    let [h, w, d] = *map.shape() else { panic!("feature map must be h x w x d") };
    let (hh, ww) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(hh * ww * d);
    for y in 0..hh {
        for x in 0..ww {
            let p = (y / factor) * w + x / factor;
            out.extend_from_slice(&map.data()[p * d..(p + 1) * d]);
        }
    }
    Array::new(&[hh, ww, d], out).expect("sized buffer")
}

/// Noisy per-token features of the input views, `V*h*w x dim`.
pub fn input_features(
    scene: &SyntheticScene,
    cameras: &[&Camera],
    patch: usize,
    dim: usize,
    noise_std: f64,
    seed: impl Fn(usize) -> u64,
) -> Result<Array<f32>, TrainError> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (v, cam) in cameras.iter().enumerate() {
        let f = synth_features(scene, cam, dim, patch, noise_std, seed(v))?;
        rows += f.shape()[0] * f.shape()[1];
        data.extend_from_slice(f.data());
    }
    Ok(Array::new(&[rows, dim], data)?)
}

/// Pixel-resolution feature map of one view.
pub fn target_features(
    scene: &SyntheticScene,
    cam: &Camera,
    patch: usize,
    dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Array<f32>, TrainError> {
    Ok(upsample(&synth_features(scene, cam, dim, patch, noise_std, seed)?, patch))
}

/// Feature the synthetic source assigns to empty pixels: its background slot.
pub fn background_feature(scene: &SyntheticScene, dim: usize) -> Vec<f32> {
    let mut bg = vec![0.0; dim];
    if let Some(v) = bg.get_mut(scene.spec.n_objects) {
        *v = 1.0;
    }
    bg
}

/// Add `transmittance * background` to an `H x W x d` feature render.
pub fn composite_background(rendered: &mut Array<f32>, transmittance: &Array<f32>, background: &[f32]) {
    let d = background.len();
    for (px, &t) in rendered.data_mut().chunks_exact_mut(d).zip(transmittance.data()) {
        px.iter_mut().zip(background).for_each(|(v, &b)| *v += t * b);
    }
}

/// Feature-training run plus the per-step freeze audit.
#[derive(Debug, Clone)]
pub struct FeatureRun {
    pub run: TrainRun<FeatureDecoder<f32>>,
    /// Largest gradient norm over Gaussian-decoder parameters, per step.
    pub frozen_grad_norms: Vec<f64>,
}

/// Train the feature decoder against rendered feature maps while the
/// Gaussian decoder stays frozen.
///
/// Attention enters through stop-gradients and the Gaussians are taken as
/// constants, so only the feature decoder receives gradients. With an output
/// directory, `c3gf.bin` and `train_features.log` are written at the end.
pub fn train_c3gf(
    model: &C3g<f32>,
    parent_hash: &str,
    cfg: &FeatureTrainConfig,
    scenes: &[TrainScene],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRow) + Send,
) -> Result<FeatureRun, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::Config("no training scenes".into()));
    }
    let mcfg = &model.config;
    let pipe = build_pipeline(mcfg, cfg.input_views)?;
    let fg: FeatureGraph = build_feature_decoder(&pipe, &FeatureConfig::new(cfg.dim))?;
    let init = FeatureDecoder::init_from_decoder(model, FeatureConfig::new(cfg.dim), cfg.seed)?;
    let raster = RasterConfig::new(cfg.s, Channels::FEATURES);
    in_pool(cfg.deterministic, move || {
        let mut dec = init;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(cfg.weight_decay);
        let mut log = Vec::with_capacity(cfg.steps);
        let mut frozen = Vec::with_capacity(cfg.steps);
        let mut skipped = Vec::new();
        for step in 0..cfg.steps {
            let sample = draw_sample(scenes, cfg.input_views, cfg.targets, &mut rng)?;
            let sc = &scenes[sample.scene];
            let images: Vec<&Array<f32>> = sample.inputs.iter().map(|&i| &sc.views[i].image).collect();
            let cams: Vec<&Camera> = sample.inputs.iter().map(|&i| &sc.views[i].camera).collect();
            let tokens = input_features(&sc.scene, &cams, mcfg.patch, cfg.dim, cfg.noise_std, |v| {
                noise_seed(cfg.seed, step, sample.scene, sample.inputs[v])
            })?;
            let mut inputs = view_inputs::<f32>(mcfg, &images)?;
            inputs.insert("f.tokens", tokens);
            let weights = Chain(&model.params, &dec.params);
            let bind = Chain(&weights, &inputs);
            let ev = fg.graph.forward(&bind).map_err(|e| non_finite(e, step, sample.scene))?;
            let mut gaussians = head_to_gaussians(ev.value(pipe.raw), &mcfg.position_bounds())?;
            let lifted = ev.value(fg.output);
            gaussians.set_features(lifted)?;
            let inv = 1.0 / sample.targets.len() as f64;
            let mut seed_grad = vec![0.0f32; lifted.len()];
            let mut loss = 0.0;
            for &t in &sample.targets {
                let view = &sc.views[t];
                let out = rasterize_forward(&gaussians, &view.camera, &raster)?;
                let mut rendered = out.features.expect("feature channel");
                if cfg.composite_background {
                    composite_background(&mut rendered, &out.transmittance, &background_feature(&sc.scene, cfg.dim));
                }
                let target = target_features(
                    &sc.scene,
                    &view.camera,
                    cfg.target_patch,
                    cfg.dim,
                    cfg.noise_std,
                    noise_seed(cfg.seed, step, sample.scene, t),
                )?;
                let l = feature_loss(&rendered, &target)?;
                if !l.value.is_finite() {
                    return Err(TrainError::NonFinite { step, scene: sample.scene });
                }
                loss += l.value * inv;
                let rg = RenderGrads {
                    features: Some(l.grad),
                    ..Default::default()
                };
                let gg = rasterize_backward(&gaussians, &view.camera, &raster, &rg)?;
                seed_grad.iter_mut().zip(&gg.features).for_each(|(a, &b)| *a += b * inv as f32);
            }
            let seed_arr = Array::new(lifted.shape(), seed_grad)?;
            let grads = ev.backward(&fg.graph, &[(fg.output, &seed_arr)])?;
            let mut frozen_max: f64 = 0.0;
            let mut trainable = Vec::new();
            for (name, g) in grads.iter() {
                if dec.params.contains(name) {
                    trainable.push((name, g));
                } else {
                    frozen_max = frozen_max.max(g.norm() as f64);
                }
            }
            frozen.push(frozen_max);
            let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min_ratio);
            if let StepOutcome::Skipped { param } = opt.step(&mut dec.params, trainable, |_| lr, |n| !decay_exempt(n)) {
                skipped.push((step, param));
            }
            let row = LogRow {
                step,
                loss,
                psnr: None,
                s: cfg.s,
                lr,
            };
            on_step(&row);
            log.push(row);
        }
        let mut checkpoint = None;
        if let Some(dir) = out_dir {
            let path = dir.join("c3gf.bin");
            checkpoint = Some((path.clone(), save_c3gf(&path, &dec, parent_hash)?));
            write_atomic(&dir.join("train_features.log"), format_log(&log).as_bytes())?;
        }
        Ok(FeatureRun {
            run: TrainRun {
                model: dec,
                log,
                skipped,
                checkpoint,
            },
            frozen_grad_norms: frozen,
        })
    })?
}
