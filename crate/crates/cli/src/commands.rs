use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c3g_core::config::RunConfig;
use c3g_core::eval::{psnr, AngleBin, Report};
use c3g_core::gradgate;
use c3g_core::model::{attention_heatmap, build_pipeline, content_hash, load_c3g, load_c3gf, C3g, FeatureDecoder};
use c3g_core::protocol::{decode_views, eval_nvs, eval_pck, lift_scene, sample_pairs, ViewPair, EVAL_S};
use c3g_core::scene::io::{
    camera_line, dataset_export, dataset_import, parse_camera_line, parse_key_values, read_cameras, write_atomic,
    write_gray_ppm, write_ppm,
};
use c3g_core::scene::generate_scene;
use c3g_core::splat::io::{load_gset, save_gset};
use c3g_core::splat::{rasterize_forward, Camera, Channels, RasterConfig};
use c3g_core::tensor::io::write_array;
use c3g_core::tensor::Array;
use c3g_core::train::{
    camera_extent, held_out_indices, refine_pose, train_c3g, train_c3gf, tto_optimize, LogRow, TrainScene, TtoConfig,
    View,
};

use crate::manifest::{now, sha256_hex, RunManifest};
use crate::{Cli, Command, DataArgs, SceneArgs, UsageError};

/// Settings and provenance shared by every subcommand.
struct Ctx {
    cfg: RunConfig,
    config_path: Option<String>,
    config_hash: String,
    command: String,
    started: f64,
}

impl Ctx {
    fn manifest(&self, dir: &Path, seed: u64, checkpoints: Vec<(String, String)>) -> Result<()> {
        RunManifest {
            command: self.command.clone(),
            config_path: self.config_path.clone(),
            config_hash: self.config_hash.clone(),
            checkpoints,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started,
            finished: now(),
        }
        .write(dir)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<(RunConfig, String)> {
    let (mut cfg, hash) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            (RunConfig::parse(&text).map_err(|e| usage(e.to_string()))?, sha256_hex(text.as_bytes()))
        }
        None => (RunConfig::default(), sha256_hex(b"")),
    };
    for o in &cli.overrides {
        cfg.apply_override(o).map_err(|e| usage(e.to_string()))?;
    }
    Ok((cfg, hash))
}

fn hash_of(path: &Path) -> Result<(String, String)> {
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok((name, content_hash(path).with_context(|| format!("hashing {}", path.display()))?))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Resolve `FILE:INDEX` to one camera of a `cams.txt` file.
fn camera_ref(spec: &str) -> Result<Camera> {
    let (file, index) = spec
        .rsplit_once(':')
        .ok_or_else(|| usage(format!("camera `{spec}` is not FILE:INDEX")))?;
    let index: usize = index.parse().map_err(|_| usage(format!("bad camera index in `{spec}`")))?;
    let cams = read_cameras(Path::new(file)).with_context(|| format!("reading {file}"))?;
    cams.get(index)
        .cloned()
        .ok_or_else(|| usage(format!("{file} has {} cameras, index {index} requested", cams.len())))
}

fn import_scene(dir: &Path, held_out: usize) -> Result<TrainScene> {
    let ds = dataset_import(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let scene = ds.scene()?;
    let held = held_out_indices(scene.spec.n_views, held_out);
    Ok(TrainScene::new(scene, held)?)
}

fn load_scenes(cfg: &RunConfig, data: &DataArgs) -> Result<Vec<TrainScene>> {
    if !data.data.is_empty() {
        return data.data.iter().map(|d| import_scene(d, cfg.data.held_out)).collect();
    }
    (0..cfg.data.scenes as u64)
        .map(|i| {
            let scene = generate_scene(&cfg.scene, cfg.data.scene_seed + i)?;
            let held = held_out_indices(cfg.scene.n_views, cfg.data.held_out);
            Ok(TrainScene::new(scene, held)?)
        })
        .collect()
}

fn load_model(path: &Path) -> Result<C3g<f32>> {
    load_c3g(path).with_context(|| format!("loading {}", path.display()))
}

fn print_row(row: &LogRow) {
    if row.step.is_multiple_of(100) {
        eprintln!("{}", row.line());
    }
}

/// Parse a `pairs.txt` line: two camera lines separated by `|`.
fn parse_pair(line: &str) -> Result<(Camera, Camera), String> {
    let (a, b) = line.split_once('|').ok_or("expected `camera | camera`")?;
    Ok((parse_camera_line(a)?, parse_camera_line(b)?))
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.80, 0.10],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.10],
    [0.60, 0.60, 0.60],
];

/// Argmax class of every pixel as a palette color, weighted by coverage.
fn argmax_colors(features: &Array<f32>, alpha: &Array<f32>) -> Array<f32> {
    let [h, w, d] = *features.shape() else { unreachable!("feature maps are H x W x D") };
    let mut out = Vec::with_capacity(h * w * 3);
    for (px, &a) in features.data().chunks_exact(d).zip(alpha.data()) {
        let k = px
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map_or(0, |(k, _)| k);
        out.extend(PALETTE[k % PALETTE.len()].iter().map(|c| c * a.clamp(0.0, 1.0)));
    }
    Array::new(&[h, w, 3], out).expect("sized buffer")
}

/// Nearest-neighbour enlargement of an `h x w` map by `factor`.
fn upsample_map(map: &Array<f64>, factor: usize) -> Array<f32> {
    let w = map.shape()[1];
    let (hh, ww) = (map.shape()[0] * factor, w * factor);
    Array::from_fn(&[hh, ww], |i| map.data()[(i / ww / factor) * w + (i % ww) / factor] as f32)
}

struct Decode {
    scene: TrainScene,
    inputs: Vec<usize>,
    model: C3g<f32>,
    v: usize,
}

fn decode_setup(ctx: &Ctx, args: &SceneArgs) -> Result<Decode> {
    let model = load_model(&args.ckpt)?;
    let scene = import_scene(&args.views, ctx.cfg.data.held_out)?;
    let v = args.inputs.unwrap_or(ctx.cfg.eval.input_views);
    let inputs = scene.eval_inputs(v).map_err(|e| usage(e.to_string()))?;
    Ok(Decode { scene, inputs, model, v })
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        ensure!(n > 0, UsageError("--workers must be positive".into()));
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (cfg, config_hash) = load_config(&cli)?;
    let ctx = Ctx {
        cfg,
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        config_hash,
        command: std::env::args().collect::<Vec<_>>().join(" "),
        started: now(),
    };
    match cli.command {
        Command::Synth { spec, out, seed } => synth(ctx, spec, &out, seed),
        Command::Train { data, out, seed, steps } => train(ctx, &data, &out, seed, steps),
        Command::TrainFeatures {
            ckpt,
            data,
            out,
            seed,
            steps,
        } => train_features(ctx, &ckpt, &data, &out, seed, steps),
        Command::Render { scene, pose, out, s } => render(ctx, &scene, &pose, &out, s),
        Command::RenderFeatures {
            scene,
            fckpt,
            pose,
            out,
            raw,
        } => render_features(ctx, &scene, &fckpt, &pose, &out, raw.as_deref()),
        Command::Attn {
            scene,
            gaussians,
            layer,
            out,
        } => attn(ctx, &scene, gaussians, layer, &out),
        Command::Tto { scene, out, steps } => tto(ctx, &scene, &out, steps),
        Command::RefinePose {
            gaussians,
            views,
            target,
            init,
            rot_deg,
            trans_frac,
            seed,
            out,
        } => refine(ctx, &gaussians, &views, target, init.as_deref(), (rot_deg, trans_frac, seed), &out),
        Command::EvalNvs { ckpt, data, inputs, out } => eval_nvs_cmd(ctx, &ckpt, &data, inputs, &out),
        Command::EvalPck {
            ckpt,
            fckpt,
            pairs,
            views,
            inputs,
            out,
        } => eval_pck_cmd(ctx, &ckpt, &fckpt, &pairs, views, inputs, out),
        Command::Gradcheck { seed, scenes, out } => gradcheck(ctx, seed, scenes, out.as_deref()),
    }
}

fn synth(mut ctx: Ctx, spec: Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<()> {
    if let Some(path) = spec {
        let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
        for (k, v) in parse_key_values(&text).map_err(usage)? {
            ctx.cfg.scene.set(&k, &v).map_err(|e| usage(e.to_string()))?;
        }
    }
    let seed = seed.unwrap_or(ctx.cfg.data.scene_seed);
    let scene = generate_scene(&ctx.cfg.scene, seed).map_err(|e| usage(e.to_string()))?;
    dataset_export(&scene, out).with_context(|| format!("exporting to {}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.eval.seed ^ seed);
    let mut pairs = String::new();
    for bin in AngleBin::ALL {
        for p in sample_pairs(&scene, 0, bin, ctx.cfg.eval.pairs_per_bin, &mut rng)? {
            pairs.push_str(&format!("{} | {}\n", camera_line(&p.a), camera_line(&p.b)));
        }
    }
    write_atomic(&out.join("pairs.txt"), pairs.as_bytes())?;
    println!("{} views written to {}", scene.spec.n_views, out.display());
    ctx.manifest(out, seed, Vec::new())
}

fn train(mut ctx: Ctx, data: &DataArgs, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<()> {
    if let Some(s) = seed {
        ctx.cfg.train.seed = s;
    }
    if let Some(n) = steps {
        ctx.cfg.train.steps = n;
    }
    let scenes = load_scenes(&ctx.cfg, data)?;
    std::fs::create_dir_all(out)?;
    let init = C3g::init(ctx.cfg.model.clone(), ctx.cfg.train.seed).map_err(|e| usage(e.to_string()))?;
    let run = train_c3g(init, &ctx.cfg.train, &scenes, Some(out), print_row)?;
    for (step, param) in &run.skipped {
        eprintln!("step {step}: skipped update, non-finite gradient in {param}");
    }
    let (path, hash) = run.checkpoint.context("training wrote no checkpoint")?;
    println!("{} ({hash})", path.display());
    ctx.manifest(out, ctx.cfg.train.seed, vec![("c3g.bin".into(), hash)])
}

fn train_features(
    mut ctx: Ctx,
    ckpt: &Path,
    data: &DataArgs,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<()> {
    if let Some(s) = seed {
        ctx.cfg.features.seed = s;
    }
    if let Some(n) = steps {
        ctx.cfg.features.steps = n;
    }
    let model = load_model(ckpt)?;
    let parent = hash_of(ckpt)?;
    let scenes = load_scenes(&ctx.cfg, data)?;
    std::fs::create_dir_all(out)?;
    let run = train_c3gf(&model, &parent.1, &ctx.cfg.features, &scenes, Some(out), print_row)?;
    let worst = run.frozen_grad_norms.iter().copied().fold(0.0, f64::max);
    let (path, hash) = run.run.checkpoint.context("training wrote no checkpoint")?;
    println!("{} ({hash}); largest frozen-parameter gradient norm {worst:e}", path.display());
    ctx.manifest(out, ctx.cfg.features.seed, vec![parent, ("c3gf.bin".into(), hash)])
}

fn render(ctx: Ctx, args: &SceneArgs, pose: &str, out: &Path, s: f64) -> Result<()> {
    let cam = camera_ref(pose)?;
    let d = decode_setup(&ctx, args)?;
    let pipe = build_pipeline(&d.model.config, d.v)?;
    let decoded = decode_views(&pipe, &d.model, &d.scene, &d.inputs)?;
    let img = rasterize_forward(&decoded.gaussians, &cam, &RasterConfig::new(s, Channels::COLOR))?
        .color
        .expect("color channel");
    write_ppm(out, &img).with_context(|| format!("writing {}", out.display()))?;
    ctx.manifest(&parent_dir(out), ctx.cfg.eval.seed, vec![hash_of(&args.ckpt)?])
}

fn render_features(
    ctx: Ctx,
    args: &SceneArgs,
    fckpt: &Path,
    pose: &str,
    out: &Path,
    raw: Option<&Path>,
) -> Result<()> {
    let cam = camera_ref(pose)?;
    let d = decode_setup(&ctx, args)?;
    let (fdec, _parent): (FeatureDecoder<f32>, String) =
        load_c3gf(fckpt).with_context(|| format!("loading {}", fckpt.display()))?;
    let pipe = build_pipeline(&d.model.config, d.v)?;
    let e = &ctx.cfg.eval;
    let g = lift_scene(&pipe, &d.model, &fdec, &d.scene, 0, &d.inputs, e.noise_std, e.seed)?;
    let rendered = rasterize_forward(&g, &cam, &RasterConfig::new(EVAL_S, Channels::FEATURES))?;
    let features = rendered.features.expect("feature channel");
    write_ppm(out, &argmax_colors(&features, &rendered.alpha)).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = raw {
        let mut buf = Vec::new();
        write_array(&mut buf, &features)?;
        write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))?;
    }
    ctx.manifest(&parent_dir(out), e.seed, vec![hash_of(&args.ckpt)?, hash_of(fckpt)?])
}

fn attn(ctx: Ctx, args: &SceneArgs, gaussians: Vec<usize>, layer: Option<usize>, out: &Path) -> Result<()> {
    let d = decode_setup(&ctx, args)?;
    let m = &d.model.config;
    let layer = layer.unwrap_or(m.layers - 1);
    let pipe = build_pipeline(m, d.v)?;
    let trace = decode_views(&pipe, &d.model, &d.scene, &d.inputs)?.trace;
    let ids = if gaussians.is_empty() {
        (0..m.n_queries).collect()
    } else {
        gaussians
    };
    std::fs::create_dir_all(out)?;
    for &i in &ids {
        for v in 0..d.v {
            let map = attention_heatmap(&trace, i, layer, v).map_err(|e| usage(e.to_string()))?;
            let map = upsample_map(&map, m.patch);
            write_gray_ppm(&out.join(format!("g{i:03}_v{v}.ppm")), &map)?;
        }
    }
    println!("{} heatmaps written to {}", ids.len() * d.v, out.display());
    ctx.manifest(out, ctx.cfg.eval.seed, vec![hash_of(&args.ckpt)?])
}

fn mean_psnr(g: &c3g_core::splat::GaussianSet<f32>, views: &[View<f32>]) -> Result<f64> {
    let raster = RasterConfig::new(EVAL_S, Channels::COLOR);
    let mut sum = 0.0;
    for v in views {
        let img = rasterize_forward(g, &v.camera, &raster)?.color.expect("color channel");
        sum += psnr(&img, &v.image)?;
    }
    Ok(sum / views.len() as f64)
}

fn tto(mut ctx: Ctx, args: &SceneArgs, out: &Path, steps: Option<usize>) -> Result<()> {
    if let Some(n) = steps {
        ctx.cfg.tto.steps = n;
    }
    let d = decode_setup(&ctx, args)?;
    let pipe = build_pipeline(&d.model.config, d.v)?;
    let ff = decode_views(&pipe, &d.model, &d.scene, &d.inputs)?.gaussians;
    let views: Vec<View<f32>> = d
        .inputs
        .iter()
        .map(|&i| View {
            image: d.scene.views[i].image.clone(),
            camera: d.scene.views[i].camera.clone(),
        })
        .collect();
    let mut cfg = ctx.cfg.tto.clone();
    // An unset extent is derived from the input cameras.
    if cfg.extent == TtoConfig::default().extent {
        let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
        cfg.extent = camera_extent(&cams);
    }
    let result = tto_optimize(&ff, &views, &cfg)?;
    std::fs::create_dir_all(out)?;
    save_gset(&out.join("gaussians_ff.bin"), &ff)?;
    save_gset(&out.join("gaussians_tto.bin"), &result.gaussians)?;
    let mut report = Report::default();
    let (before, after) = (mean_psnr(&ff, &views)?, mean_psnr(&result.gaussians, &views)?);
    report.set_summary("psnr_before", before);
    report.set_summary("psnr_after", after);
    report.set_summary("gaussians_before", ff.len() as f64);
    report.set_summary("gaussians_after", result.gaussians.len() as f64);
    report.set_summary("densify_events", result.densify_events as f64);
    report.write(out)?;
    print!("{}", report.summary_text());
    ctx.manifest(out, cfg.seed, vec![hash_of(&args.ckpt)?])
}

fn refine(
    ctx: Ctx,
    gaussians: &Path,
    views: &Path,
    target: usize,
    init: Option<&str>,
    (rot_deg, trans_frac, seed): (f64, f64, u64),
    out: &Path,
) -> Result<()> {
    let g = load_gset::<f32>(gaussians).with_context(|| format!("loading {}", gaussians.display()))?;
    let ds = dataset_import(views).with_context(|| format!("reading dataset {}", views.display()))?;
    let view = ds
        .views
        .get(target)
        .ok_or_else(|| usage(format!("dataset has {} views, target {target} requested", ds.views.len())))?;
    let truth = &view.camera;
    let extent = ds.spec.extent;
    let start = match init {
        Some(spec) => camera_ref(spec)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut unit = || {
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    .normalize()
            };
            let w = unit() * rot_deg.to_radians();
            let t = unit() * trans_frac * extent;
            truth.perturbed(&w, &t)
        }
    };
    let result = refine_pose(&g, &view.image, &start, &ctx.cfg.pose)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("pose.txt"), format!("{}\n", camera_line(&result.camera)).as_bytes())?;
    let mut report = Report::default();
    let err = |c: &Camera| (c.rotation_angle_to(truth).to_degrees(), (c.center() - truth.center()).norm() / extent);
    let (r0, t0) = err(&start);
    let (r1, t1) = err(&result.camera);
    report.set_summary("rotation_deg_before", r0);
    report.set_summary("rotation_deg_after", r1);
    report.set_summary("translation_frac_before", t0);
    report.set_summary("translation_frac_after", t1);
    report.set_summary("loss", result.loss);
    report.write(out)?;
    print!("{}", report.summary_text());
    ctx.manifest(out, seed, Vec::new())
}

fn eval_nvs_cmd(ctx: Ctx, ckpt: &Path, data: &DataArgs, inputs: Option<usize>, out: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let scenes = load_scenes(&ctx.cfg, data)?;
    let report = eval_nvs(&model, &scenes, inputs.unwrap_or(ctx.cfg.eval.input_views))?;
    report.write(out)?;
    print!("{}", report.summary_text());
    ctx.manifest(out, ctx.cfg.eval.seed, vec![hash_of(ckpt)?])
}

fn eval_pck_cmd(
    ctx: Ctx,
    ckpt: &Path,
    fckpt: &Path,
    pairs: &Path,
    views: Option<PathBuf>,
    inputs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let (fdec, _parent): (FeatureDecoder<f32>, String) =
        load_c3gf(fckpt).with_context(|| format!("loading {}", fckpt.display()))?;
    let dir = views.unwrap_or_else(|| parent_dir(pairs));
    let scene = import_scene(&dir, ctx.cfg.data.held_out)?;
    let text = std::fs::read_to_string(pairs).with_context(|| format!("reading {}", pairs.display()))?;
    let mut list = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (a, b) = parse_pair(line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", pairs.display(), n + 1))?;
        list.push(ViewPair { scene: 0, a, b });
    }
    if list.is_empty() {
        bail!("{} lists no pairs", pairs.display());
    }
    let e = &ctx.cfg.eval;
    let v = inputs.unwrap_or(e.input_views);
    let report = eval_pck(&model, &fdec, &[scene], &list, v, e.noise_std, e.seed, &e.matching)?;
    let out = out.unwrap_or(dir);
    report.write(&out)?;
    print!("{}", report.summary_text());
    ctx.manifest(&out, e.seed, vec![hash_of(ckpt)?, hash_of(fckpt)?])
}

fn gradcheck(ctx: Ctx, seed: u64, scenes: usize, out: Option<&Path>) -> Result<()> {
    let gates = gradgate::run_all(seed, scenes)?;
    let mut report = Report::default();
    for g in &gates {
        println!("{:<28} {:.3e} {}", g.name, g.error, if g.passed() { "ok" } else { "FAIL" });
        report.push("rel_error", g.error, &g.name, 0);
    }
    let worst = gates.iter().map(|g| g.error).fold(0.0, f64::max);
    report.set_summary("worst", worst);
    if let Some(dir) = out {
        report.write(dir)?;
        ctx.manifest(dir, seed, Vec::new())?;
    }
    let failed = gates.iter().filter(|g| !g.passed()).count();
    ensure!(failed == 0, "{failed} of {} gradient gates above {:e}", gates.len(), gradgate::GATE_TOLERANCE);
    println!("{} gates passed, worst {worst:.3e}", gates.len());
    Ok(())
}
