//! Acceptance criteria, one pass/fail line each.
//!
//! Runs as a plain binary so the lines always reach the test log. Criterion 5
//! is a documented known failure and runs only with `--ignored` or
//! `--include-ignored`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c3g_core::eval::{psnr, AngleBin};
use c3g_core::gradgate::{run_all, GATE_TOLERANCE};
use c3g_core::model::{build_pipeline, C3g, FeatureDecoder, ModelConfig};
use c3g_core::protocol::{decode_views, eval_features, eval_nvs, eval_pck, sample_pairs, score_pair, lift_scene, ViewPair};
use c3g_core::scene::io::encode_ppm;
use c3g_core::scene::{generate_scene, SceneSpec};
use c3g_core::splat::{rasterize_forward, reference_rasterize, Camera, Channels, GaussianSet, RasterConfig};
use c3g_core::tensor::Array;
use c3g_core::train::{
    camera_extent, cosine_lr, held_out_indices, lowpass_schedule, refine_pose, seed_from_depth, train_c3g, train_c3gf,
    tto_optimize, FeatureTrainConfig, LowpassSchedule, PoseConfig, TrainConfig, TrainScene, TtoConfig, View,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Three textured-box scenes with two held-out rig views each.
fn scenes() -> Vec<TrainScene> {
    let spec = SceneSpec::default();
    (0..3)
        .map(|s| {
            let scene = generate_scene(&spec, s).expect("valid default spec");
            TrainScene::new(scene, held_out_indices(spec.n_views, 2)).expect("valid split")
        })
        .collect()
}

fn reconstruction_config() -> TrainConfig {
    TrainConfig {
        steps: 6000,
        lr_decoder: 3e-4,
        targets: 3,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

struct Fixture {
    scenes: Vec<TrainScene>,
    model: C3g<f32>,
    train_time: Duration,
}

fn fixture() -> Fixture {
    let scenes = scenes();
    let start = Instant::now();
    let init = C3g::init(ModelConfig::default(), 0).expect("default model");
    let run = train_c3g(init, &reconstruction_config(), &scenes, None, |_| {}).expect("training runs");
    Fixture {
        scenes,
        model: run.model,
        train_time: start.elapsed(),
    }
}

fn feature_config() -> FeatureTrainConfig {
    FeatureTrainConfig {
        lr: 3e-3,
        ..FeatureTrainConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let gates = run_all(0, 24).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = gates.iter().max_by(|a, b| a.error.total_cmp(&b.error)).expect("gates ran");
    let failed: Vec<&str> = gates.iter().filter(|g| !g.passed()).map(|g| g.name.as_str()).collect();
    let scenes = gates.iter().filter(|g| g.name.starts_with("raster_scene")).count();
    check(
        failed.is_empty() && scenes >= 20 && elapsed < Duration::from_secs(120),
        format!(
            "{} gates ({scenes} raster scenes), worst {} = {:.2e} < {GATE_TOLERANCE:e}, failed {failed:?}, {}",
            gates.len(),
            worst.name,
            worst.error,
            secs(elapsed)
        ),
    )
}

fn random_scene(rng: &mut ChaCha8Rng) -> (GaussianSet<f64>, Camera) {
    let cam = Camera::look_at(
        Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        32,
        32,
        32.0,
    );
    let n = rng.random_range(1..=64);
    let mut g = GaussianSet::default();
    for _ in 0..n {
        g.push(
            std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            std::array::from_fn(|_| rng.random_range(-3.5..-1.0)),
            std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            rng.random_range(-3.0..5.0),
            std::array::from_fn(|_| rng.random_range(-3.0..3.0)),
        );
    }
    let feats = Array::from_fn(&[n, 4], |_| rng.random_range(-1.0..1.0));
    g.set_features(&feats).expect("matching count");
    (g, cam)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut diff, mut tele): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let (g, cam) = random_scene(&mut rng);
        for s in [0.3, 3.0, 30.0] {
            let cfg = RasterConfig::new(s, Channels::ALL);
            let a = rasterize_forward(&g, &cam, &cfg).map_err(|e| e.to_string())?;
            let b = reference_rasterize(&g, &cam, &cfg).map_err(|e| e.to_string())?;
            let pairs = [
                (a.color.as_ref(), b.color.as_ref()),
                (a.features.as_ref(), b.features.as_ref()),
                (a.depth.as_ref(), b.depth.as_ref()),
                (Some(&a.alpha), Some(&b.alpha)),
            ];
            for (x, y) in pairs {
                diff = diff.max(x.expect("channel").max_abs_diff(y.expect("channel")));
            }
            for (al, tr) in a.alpha.data().iter().zip(a.transmittance.data()) {
                tele = tele.max((al + tr - 1.0).abs());
            }
        }
    }
    check(
        diff <= 1e-6 && tele <= 1e-5,
        format!("150 renders, tiled vs reference max diff {diff:.2e} <= 1e-6, telescoping residual {tele:.2e} <= 1e-5"),
    )
}

fn criterion_3() -> Outcome {
    let sched = LowpassSchedule::default();
    let s = |step| lowpass_schedule(step, &sched);
    let exact = s(0) == 10.0 && s(1000) == 10.0 / 3.0 && [4000, 4001, 5000, 20000].iter().all(|&k| s(k) == 0.3);
    let monotone = (0..6000).all(|k| s(k + 1) <= s(k));
    let lr = 1e-4;
    let ends = cosine_lr(0, 20000, lr, 0.1) == lr && cosine_lr(20000, 20000, lr, 0.1) == 0.1 * lr;
    check(
        exact && monotone && ends,
        format!(
            "s(0)={} s(1000)={} s(4000)={} monotone={monotone}; lr(0)={:e} lr(T)={:e}",
            s(0),
            s(1000),
            s(4000),
            cosine_lr(0, 20000, lr, 0.1),
            cosine_lr(20000, 20000, lr, 0.1)
        ),
    )
}

fn criterion_4(fx: &Fixture) -> Outcome {
    let report = eval_nvs(&fx.model, &fx.scenes, 8).map_err(|e| e.to_string())?;
    let per_scene: Vec<f64> = (0..fx.scenes.len())
        .map(|s| {
            let vals: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.metric == "psnr" && r.scene == s.to_string())
                .map(|r| r.value)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let mut counts = Vec::new();
    for v in [2, 4, 8] {
        let pipe = build_pipeline(&fx.model.config, v).map_err(|e| e.to_string())?;
        for sc in &fx.scenes {
            let inputs = sc.eval_inputs(v).map_err(|e| e.to_string())?;
            counts.push(decode_views(&pipe, &fx.model, sc, &inputs).map_err(|e| e.to_string())?.gaussians.len());
        }
    }
    let n = fx.model.config.n_queries;
    check(
        per_scene.iter().all(|&p| p >= 22.0) && counts.iter().all(|&c| c == n) && fx.train_time < Duration::from_secs(3600),
        format!(
            "held-out PSNR per scene {:?} (>= 22), counts {counts:?} (== {n}), training {}",
            per_scene.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>(),
            secs(fx.train_time)
        ),
    )
}

/// Mean training loss over the last 100 of 1000 steps, or `None` when the
/// run reports a non-finite loss.
fn loss_at_1k(lowpass: bool) -> Option<f64> {
    let mut cfg = TrainConfig {
        steps: 1000,
        ..reconstruction_config()
    };
    cfg.lowpass.enabled = lowpass;
    let init = C3g::init(ModelConfig::default(), 0).expect("default model");
    match train_c3g(init, &cfg, &scenes(), None, |_| {}) {
        Ok(run) => Some(run.log[900..].iter().map(|r| r.loss).sum::<f64>() / 100.0),
        Err(_) => None,
    }
}

fn criterion_5() -> Outcome {
    let scheduled = loss_at_1k(true).ok_or("scheduled run diverged")?;
    match loss_at_1k(false) {
        None => Ok(format!("s = 0.3 run diverged; scheduled loss {scheduled:.5}")),
        Some(flat) => check(
            flat >= scheduled,
            format!("1K-step loss: s = 0.3 {flat:.5} vs scheduled {scheduled:.5} (need >=)"),
        ),
    }
}

fn criterion_6(fx: &Fixture, fdec: &FeatureDecoder<f32>, frozen: &[f64], time: Duration) -> Outcome {
    let report = eval_features(&fx.model, fdec, &fx.scenes, 8, 0.3, 7).map_err(|e| e.to_string())?;
    let accs: Vec<f64> = report.rows.iter().map(|r| r.value).collect();
    let frozen_zero = frozen.iter().all(|&n| n == 0.0);
    check(
        accs.iter().all(|&a| a >= 90.0) && frozen_zero && frozen.len() == 1000 && time < Duration::from_secs(600),
        format!(
            "held-out accuracy {:?} (>= 90), frozen grad norms all zero over {} steps: {frozen_zero}, {}",
            accs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>(),
            frozen.len(),
            secs(time)
        ),
    )
}

fn criterion_7(fx: &Fixture, fdec: &FeatureDecoder<f32>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pairs = Vec::new();
    for bin in AngleBin::ALL {
        for k in 0..20 {
            let s = k % fx.scenes.len();
            pairs.extend(sample_pairs(&fx.scenes[s].scene, s, bin, 1, &mut rng).map_err(|e| e.to_string())?);
        }
    }
    let cfg = Default::default();
    let report = eval_pck(&fx.model, fdec, &fx.scenes, &pairs, 8, 0.3, 11, &cfg).map_err(|e| e.to_string())?;
    let gain = report.summary_value("gain.avg").expect("summary");
    let bins: Vec<String> = AngleBin::ALL
        .iter()
        .map(|b| {
            let raw = report.summary_value(&format!("raw.{}", b.label())).unwrap_or(f64::NAN);
            let lifted = report.summary_value(&format!("lifted.{}", b.label())).unwrap_or(f64::NAN);
            format!("{} {raw:.1}->{lifted:.1}", b.label())
        })
        .collect();

    let sc = &fx.scenes[0];
    let pipe = build_pipeline(&fx.model.config, 8).map_err(|e| e.to_string())?;
    let inputs = sc.eval_inputs(8).map_err(|e| e.to_string())?;
    let lifted = lift_scene(&pipe, &fx.model, fdec, sc, 0, &inputs, 0.3, 11).map_err(|e| e.to_string())?;
    let cam = sc.views[sc.held_out[0]].camera.clone();
    let same = ViewPair {
        scene: 0,
        a: cam.clone(),
        b: cam,
    };
    let sanity = score_pair(sc, &lifted, &same, fx.model.config.patch, 0.3, (5, 5), &cfg).map_err(|e| e.to_string())?;
    check(
        gain >= 20.0 && sanity.lifted == 100.0 && sanity.raw == 100.0,
        format!(
            "80 pairs, PCK@10px raw->lifted [{}], gain {gain:.1} (>= 20), identical pair raw {:.1} lifted {:.1}",
            bins.join(", "),
            sanity.raw,
            sanity.lifted
        ),
    )
}

fn mean_psnr(g: &GaussianSet<f32>, views: &[View<f32>]) -> Result<f64, String> {
    let rc = RasterConfig::new(0.3, Channels::COLOR);
    let mut sum = 0.0;
    for v in views {
        let img = rasterize_forward(g, &v.camera, &rc).map_err(|e| e.to_string())?.color.expect("color");
        sum += psnr(&img, &v.image).map_err(|e| e.to_string())?;
    }
    Ok(sum / views.len() as f64)
}

fn criterion_8(fx: &Fixture) -> Outcome {
    let pipe = build_pipeline(&fx.model.config, 8).map_err(|e| e.to_string())?;
    let budget = 4 * fx.model.config.n_queries;
    let mut lines = Vec::new();
    let mut ok = true;
    for (si, sc) in fx.scenes.iter().enumerate() {
        let inputs = sc.eval_inputs(8).map_err(|e| e.to_string())?;
        let d = decode_views(&pipe, &fx.model, sc, &inputs).map_err(|e| e.to_string())?;
        let views: Vec<View<f32>> = inputs
            .iter()
            .map(|&i| View {
                image: sc.views[i].image.clone(),
                camera: sc.views[i].camera.clone(),
            })
            .collect();
        let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
        let cfg = TtoConfig {
            extent: camera_extent(&cams),
            max_gaussians: budget,
            ..TtoConfig::default()
        };
        let start = Instant::now();
        let out = tto_optimize(&d.gaussians, &views, &cfg).map_err(|e| e.to_string())?;
        let time = start.elapsed();
        let (before, after) = (mean_psnr(&d.gaussians, &views)?, mean_psnr(&out.gaussians, &views)?);
        ok &= after - before >= 2.0 && out.gaussians.len() <= budget && time < Duration::from_secs(600);
        lines.push(format!(
            "scene {si}: {before:.2} -> {after:.2} dB (+{:.2}), {} Gaussians, {}",
            after - before,
            out.gaussians.len(),
            secs(time)
        ));
    }
    check(ok, format!("{}; budget {budget}", lines.join("; ")))
}

fn criterion_9() -> Outcome {
    let scene = generate_scene(&SceneSpec::default(), 0).map_err(|e| e.to_string())?;
    let views = scene.render_rig();
    let init = seed_from_depth::<f32>(&views, 256, 0).map_err(|e| e.to_string())?;
    let train: Vec<View<f32>> = views
        .iter()
        .map(|v| View {
            image: v.image.clone(),
            camera: v.camera.clone(),
        })
        .collect();
    let cams: Vec<&Camera> = train.iter().map(|v| &v.camera).collect();
    let fit_cfg = TtoConfig {
        steps: 200,
        densify_interval: 0,
        extent: camera_extent(&cams),
        max_gaussians: 256,
        ..TtoConfig::default()
    };
    let fit = tto_optimize(&init, &train, &fit_cfg).map_err(|e| e.to_string())?.gaussians;
    let raster = RasterConfig::new(0.3, Channels::COLOR);
    let extent = scene.spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let unit = |rng: &mut ChaCha8Rng| {
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
    };
    let (mut worst_rot, mut worst_trans, mut recovered): (f64, f64, usize) = (0.0, 0.0, 0);
    for trial in 0..10 {
        let truth = &views[trial % views.len()].camera;
        let target = rasterize_forward(&fit, truth, &raster).map_err(|e| e.to_string())?.color.expect("color");
        let start = truth.perturbed(&(unit(&mut rng) * 5f64.to_radians()), &(unit(&mut rng) * 0.03 * extent));
        let out = refine_pose(&fit, &target, &start, &PoseConfig::default()).map_err(|e| e.to_string())?;
        let rot = out.camera.rotation_angle_to(truth).to_degrees();
        let trans = (out.camera.center() - truth.center()).norm() / extent;
        worst_rot = worst_rot.max(rot);
        worst_trans = worst_trans.max(trans);
        if rot <= 0.5 && trans <= 0.01 {
            recovered += 1;
        }
    }
    check(
        recovered == 10,
        format!(
            "{recovered}/10 recovered from 5 deg / 3% extent; worst {worst_rot:.3} deg (<= 0.5), {:.3}% extent (<= 1%)",
            worst_trans * 100.0
        ),
    )
}

/// Artifacts of one short pipeline run: checkpoints, a render and summaries.
fn determinism_run(dir: &std::path::Path) -> Result<Vec<Vec<u8>>, String> {
    let spec = SceneSpec {
        n_objects: 2,
        ..SceneSpec::default()
    };
    let scenes: Vec<TrainScene> = (0..2)
        .map(|s| TrainScene::new(generate_scene(&spec, s).expect("spec"), vec![3, 9]).expect("split"))
        .collect();
    let mcfg = ModelConfig {
        n_queries: 16,
        dim: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 40,
        input_views: 4,
        checkpoint_every: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = train_c3g(C3g::init(mcfg, 5).expect("model"), &cfg, &scenes, Some(dir), |_| {}).map_err(|e| e.to_string())?;
    let hash = run.checkpoint.as_ref().expect("checkpoint").1.clone();
    let fcfg = FeatureTrainConfig {
        dim: 8,
        steps: 20,
        input_views: 4,
        seed: 5,
        ..FeatureTrainConfig::default()
    };
    let frun = train_c3gf(&run.model, &hash, &fcfg, &scenes, Some(dir), |_| {}).map_err(|e| e.to_string())?;
    let nvs = eval_nvs(&run.model, &scenes, 4).map_err(|e| e.to_string())?;
    let feats = eval_features(&run.model, &frun.run.model, &scenes, 4, 0.3, 5).map_err(|e| e.to_string())?;
    let pipe = build_pipeline(&run.model.config, 4).map_err(|e| e.to_string())?;
    let inputs = scenes[0].eval_inputs(4).map_err(|e| e.to_string())?;
    let d = decode_views(&pipe, &run.model, &scenes[0], &inputs).map_err(|e| e.to_string())?;
    let img = rasterize_forward(&d.gaussians, &scenes[0].views[3].camera, &RasterConfig::new(0.3, Channels::COLOR))
        .map_err(|e| e.to_string())?
        .color
        .expect("color");
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    Ok(vec![
        read("c3g.bin")?,
        read("c3gf.bin")?,
        read("train.log")?,
        read("train_features.log")?,
        encode_ppm(&img),
        nvs.summary_text().into_bytes(),
        feats.summary_text().into_bytes(),
    ])
}

fn criterion_10() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let a = determinism_run(dirs[0].path())?;
    let b = determinism_run(dirs[1].path())?;
    let names = ["c3g.bin", "c3gf.bin", "train.log", "train_features.log", "render", "nvs summary", "feature summary"];
    let differing: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    check(
        differing.is_empty(),
        format!("two runs compared on {names:?}; differing: {differing:?}"),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let with_ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failures = 0;
    let mut report = |n: usize, name: &str, out: Outcome| {
        match &out {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({d})"),
            Err(d) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL ({d})");
            }
        }
    };
    report(1, "gradient gate", criterion_1());
    report(2, "rasterizer oracle", criterion_2());
    report(3, "schedule exactness", criterion_3());
    let fx = fixture();
    report(4, "desk-scale reconstruction", criterion_4(&fx));
    if with_ignored {
        report(5, "low-pass necessity", criterion_5());
    } else {
        println!("criterion  5 low-pass necessity: IGNORED (known failure at desk scale; run with --ignored)");
    }
    let start = Instant::now();
    let frun = train_c3gf(&fx.model, "fixture", &feature_config(), &fx.scenes, None, |_| {});
    let ftime = start.elapsed();
    match frun {
        Ok(frun) => {
            report(6, "feature lifting", criterion_6(&fx, &frun.run.model, &frun.frozen_grad_norms, ftime));
            report(7, "correspondence gain", criterion_7(&fx, &frun.run.model));
        }
        Err(e) => {
            report(6, "feature lifting", Err(e.to_string()));
            report(7, "correspondence gain", Err("no feature decoder".into()));
        }
    }
    report(8, "TTO gain", criterion_8(&fx));
    report(9, "pose refinement", criterion_9());
    report(10, "determinism", criterion_10());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
