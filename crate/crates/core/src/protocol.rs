//! End-to-end evaluation runs: held-out novel views, lifted-feature
//! accuracy and two-view correspondence.

use rand::Rng;
use thiserror::Error;

use crate::eval::{
    angle_bin, feature_argmax_accuracy, pck_two_view, psnr, ssim, AngleBin, EvalError, MatchConfig, Report,
};
use crate::model::{build_pipeline, C3g, Decoded, FeatureDecoder, ModelError, Pipeline};
use crate::scene::{correspondences, synth_features, SceneError, SyntheticScene};
use crate::splat::{rasterize_forward, Camera, Channels, GaussianSet, RasterConfig, SplatError};
use crate::tensor::{Array, TensorError};
use crate::train::{input_features, noise_seed, TrainError, TrainScene};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Low-pass dilation used for every evaluation render.
pub const EVAL_S: f64 = 0.3;

/// Decode a scene from the listed input views.
pub fn decode_views(
    pipe: &Pipeline,
    model: &C3g<f32>,
    sc: &TrainScene,
    inputs: &[usize],
) -> Result<Decoded<f32>, ProtocolError> {
    let images: Vec<&Array<f32>> = inputs.iter().map(|&i| &sc.views[i].image).collect();
    Ok(pipe.decode(model, &images)?)
}

/// Gaussians decoded from `inputs` carrying features lifted from noisy
/// per-view features of the same inputs.
#[allow(clippy::too_many_arguments)]
pub fn lift_scene(
    pipe: &Pipeline,
    model: &C3g<f32>,
    fdec: &FeatureDecoder<f32>,
    sc: &TrainScene,
    scene_index: usize,
    inputs: &[usize],
    noise_std: f64,
    seed: u64,
) -> Result<GaussianSet<f32>, ProtocolError> {
    let d = decode_views(pipe, model, sc, inputs)?;
    let m = &model.config;
    let cams: Vec<&Camera> = inputs.iter().map(|&i| &sc.views[i].camera).collect();
    let dim = fdec.config.dim;
    let feats = input_features(&sc.scene, &cams, m.patch, dim, noise_std, |v| {
        noise_seed(seed, usize::MAX, scene_index, inputs[v])
    })?;
    let feats = feats.reshape(&[inputs.len(), m.grid_h, m.grid_w, dim])?;
    let lifted = fdec.decode_features(&d.trace, &feats)?;
    let mut g = d.gaussians;
    g.set_features(&lifted)?;
    Ok(g)
}

/// Held-out PSNR and SSIM with `v` input views, plus the Gaussian count.
///
/// Summary keys: `psnr_mean`, `psnr_min`, `ssim_mean`, `gaussians`.
pub fn eval_nvs(model: &C3g<f32>, scenes: &[TrainScene], v: usize) -> Result<Report, ProtocolError> {
    let pipe = build_pipeline(&model.config, v)?;
    let raster = RasterConfig::new(EVAL_S, Channels::COLOR);
    let mut report = Report::default();
    let mut count = 0;
    for (si, sc) in scenes.iter().enumerate() {
        let d = decode_views(&pipe, model, sc, &sc.eval_inputs(v)?)?;
        count = count.max(d.gaussians.len());
        for &h in &sc.held_out {
            let view = &sc.views[h];
            let color = rasterize_forward(&d.gaussians, &view.camera, &raster)?
                .color
                .expect("color channel");
            report.push("psnr", psnr(&color, &view.image)?, si, h);
            report.push("ssim", ssim(&color, &view.image)?, si, h);
        }
    }
    let min = report
        .rows
        .iter()
        .filter(|r| r.metric == "psnr")
        .map(|r| r.value)
        .fold(f64::INFINITY, f64::min);
    report.set_summary("psnr_mean", report.mean("psnr").unwrap_or(f64::NAN));
    report.set_summary("psnr_min", min);
    report.set_summary("ssim_mean", report.mean("ssim").unwrap_or(f64::NAN));
    report.set_summary("gaussians", count as f64);
    Ok(report)
}

/// Argmax accuracy of lifted features at held-out views over pixels with
/// rendered alpha above 0.5.
///
/// Summary keys: `accuracy_mean`, `accuracy_min`.
pub fn eval_features(
    model: &C3g<f32>,
    fdec: &FeatureDecoder<f32>,
    scenes: &[TrainScene],
    v: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Report, ProtocolError> {
    let pipe = build_pipeline(&model.config, v)?;
    let raster = RasterConfig::new(EVAL_S, Channels::FEATURES);
    let mut report = Report::default();
    for (si, sc) in scenes.iter().enumerate() {
        let g = lift_scene(&pipe, model, fdec, sc, si, &sc.eval_inputs(v)?, noise_std, seed)?;
        for &h in &sc.held_out {
            let view = &sc.views[h];
            let out = rasterize_forward(&g, &view.camera, &raster)?;
            let mask: Vec<bool> = out.alpha.data().iter().map(|&a| a > 0.5).collect();
            let f = out.features.expect("feature channel");
            let acc = feature_argmax_accuracy(&f, &view.ids, &mask, sc.scene.spec.n_objects)?;
            report.push("accuracy", acc, si, h);
        }
    }
    let min = report.rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    report.set_summary("accuracy_mean", report.mean("accuracy").unwrap_or(f64::NAN));
    report.set_summary("accuracy_min", min);
    Ok(report)
}

/// Two cameras of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub scene: usize,
    pub a: Camera,
    pub b: Camera,
}

/// `count` orbit-camera pairs whose viewing-angle difference falls in `bin`.
///
/// The first camera takes a random azimuth; the second is offset by an
/// azimuth drawn from the bin range, both at rig elevations. Draws that land
/// in another bin are rejected.
pub fn sample_pairs<R: Rng>(
    scene: &SyntheticScene,
    scene_index: usize,
    bin: AngleBin,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ViewPair>, ProtocolError> {
    let (lo, hi) = bin.range();
    let (el_lo, el_hi) = scene.spec.elevation_deg;
    let elevation = |rng: &mut R| if el_hi > el_lo { rng.random_range(el_lo..el_hi) } else { el_lo };
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * count.max(1) {
            return Err(ProtocolError::Setup(format!("could not sample pairs for bin {}", bin.label())));
        }
        let az = rng.random_range(0.0..360.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let delta = rng.random_range(lo..hi);
        let a = scene.orbit_camera(az, elevation(rng));
        let b = scene.orbit_camera(az + sign * delta, elevation(rng));
        if angle_bin(&a, &b) == bin {
            out.push(ViewPair { scene: scene_index, a, b });
        }
    }
    Ok(out)
}

/// PCK of raw and of lifted-and-re-rendered features on one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub raw: f64,
    pub lifted: f64,
}

/// Score one pair given the scene's feature-carrying Gaussians.
pub fn score_pair(
    sc: &TrainScene,
    lifted: &GaussianSet<f32>,
    pair: &ViewPair,
    patch: usize,
    noise_std: f64,
    seeds: (u64, u64),
    cfg: &MatchConfig,
) -> Result<PairScore, ProtocolError> {
    let ra = sc.scene.trace_ground_truth(&pair.a);
    let rb = sc.scene.trace_ground_truth(&pair.b);
    let gt = correspondences(&ra, &rb);
    let dim = lifted.feature_dim;
    let raw_a = synth_features(&sc.scene, &pair.a, dim, patch, noise_std, seeds.0)?;
    let raw_b = synth_features(&sc.scene, &pair.b, dim, patch, noise_std, seeds.1)?;
    let raster = RasterConfig::new(EVAL_S, Channels::FEATURES);
    let la = rasterize_forward(lifted, &pair.a, &raster)?.features.expect("feature channel");
    let lb = rasterize_forward(lifted, &pair.b, &raster)?.features.expect("feature channel");
    Ok(PairScore {
        raw: pck_two_view(&raw_a, &raw_b, &gt, cfg)?.pck,
        lifted: pck_two_view(&la, &lb, &gt, cfg)?.pck,
    })
}

/// PCK over view pairs, grouped by angle bin.
///
/// Rows: `pck_raw` and `pck_lifted` per pair (view column is the pair index).
/// Summary keys: `raw.<bin>`, `lifted.<bin>` for every bin with pairs, then
/// `raw.avg`, `lifted.avg` and `gain.avg` averaged over those bins.
#[allow(clippy::too_many_arguments)]
pub fn eval_pck(
    model: &C3g<f32>,
    fdec: &FeatureDecoder<f32>,
    scenes: &[TrainScene],
    pairs: &[ViewPair],
    v: usize,
    noise_std: f64,
    seed: u64,
    cfg: &MatchConfig,
) -> Result<Report, ProtocolError> {
    let pipe = build_pipeline(&model.config, v)?;
    let lifted: Vec<GaussianSet<f32>> = scenes
        .iter()
        .enumerate()
        .map(|(si, sc)| lift_scene(&pipe, model, fdec, sc, si, &sc.eval_inputs(v)?, noise_std, seed))
        .collect::<Result<_, _>>()?;
    let mut report = Report::default();
    let mut bins: Vec<(AngleBin, Vec<PairScore>)> = AngleBin::ALL.iter().map(|&b| (b, Vec::new())).collect();
    for (k, pair) in pairs.iter().enumerate() {
        let sc = scenes
            .get(pair.scene)
            .ok_or_else(|| ProtocolError::Setup(format!("pair {k} names scene {}", pair.scene)))?;
        let seeds = (noise_seed(seed, k, pair.scene, 0), noise_seed(seed, k, pair.scene, 1));
        let score = score_pair(sc, &lifted[pair.scene], pair, model.config.patch, noise_std, seeds, cfg)?;
        report.push("pck_raw", score.raw, pair.scene, k);
        report.push("pck_lifted", score.lifted, pair.scene, k);
        let bin = angle_bin(&pair.a, &pair.b);
        bins.iter_mut().find(|(b, _)| *b == bin).expect("every bin listed").1.push(score);
    }
    let (mut raw_sum, mut lifted_sum, mut used) = (0.0, 0.0, 0);
    for (bin, scores) in &bins {
        if scores.is_empty() {
            continue;
        }
        let n = scores.len() as f64;
        let raw = scores.iter().map(|s| s.raw).sum::<f64>() / n;
        let lifted = scores.iter().map(|s| s.lifted).sum::<f64>() / n;
        report.set_summary(&format!("raw.{}", bin.label()), raw);
        report.set_summary(&format!("lifted.{}", bin.label()), lifted);
        raw_sum += raw;
        lifted_sum += lifted;
        used += 1;
    }
    if used == 0 {
        return Err(ProtocolError::Setup("no view pairs".into()));
    }
    let n = used as f64;
    report.set_summary("raw.avg", raw_sum / n);
    report.set_summary("lifted.avg", lifted_sum / n);
    report.set_summary("gain.avg", (lifted_sum - raw_sum) / n);
    Ok(report)
}
