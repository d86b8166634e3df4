use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use c3g_core::eval::MatchConfig;
use c3g_core::model::{build_pipeline, load_c3g, load_c3gf, C3g, FeatureDecoder};
use c3g_core::protocol::{lift_scene, score_pair, ViewPair};
use c3g_core::scene::io::{dataset_import, parse_camera_line, read_cameras};
use c3g_core::train::{held_out_indices, noise_seed, TrainScene};

const SUBCOMMANDS: [&str; 11] = [
    "synth",
    "train",
    "train-features",
    "render",
    "render-features",
    "attn",
    "tto",
    "refine-pose",
    "eval-nvs",
    "eval-pck",
    "gradcheck",
];

/// Overrides that shrink the model and runs to test size.
const TINY: [&str; 12] = [
    "model.n_queries=8",
    "model.dim=16",
    "model.layers=1",
    "model.heads=2",
    "train.steps=4",
    "train.input_views=2",
    "features.steps=3",
    "features.input_views=2",
    "eval.input_views=2",
    "eval.pairs_per_bin=2",
    "tto.steps=3",
    "pose.steps=3",
];

fn c3g(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_c3g"));
    for o in TINY {
        cmd.args(["--set", o]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = c3g(args);
    assert!(
        out.status.success(),
        "c3g {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn summary(dir: &Path) -> Vec<(String, f64)> {
    std::fs::read_to_string(dir.join("summary.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

struct Trained {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

/// Synthesize one scene, train both decoders for a few steps.
fn trained() -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth", "--out", p(&data), "--seed", "7"]);
    ok(&["train", "--data", p(&data), "--out", p(&run)]);
    let ckpt = run.join("c3g.bin");
    ok(&["train-features", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&run)]);
    Trained { _tmp: tmp, data, run }
}

#[test]
fn help_lists_flags_for_every_subcommand() {
    let out = c3g(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in SUBCOMMANDS {
        assert!(text.contains(sub), "top-level help misses {sub}");
        let out = c3g(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help");
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in ["--config", "--set", "--workers"] {
            assert!(text.contains(flag), "{sub} --help misses {flag}");
        }
    }
    let text = String::from_utf8(c3g(&["render", "--help"]).stdout).unwrap();
    for flag in ["--ckpt", "--views", "--inputs", "--pose", "--out", "--s"] {
        assert!(text.contains(flag), "render --help misses {flag}");
    }
}

#[test]
fn usage_errors_exit_one_with_text_on_stderr() {
    for args in [
        vec!["frobnicate"],
        vec!["synth", "--bogus"],
        vec!["synth"],
        vec!["--set", "train.nope=1", "gradcheck", "--scenes", "1"],
        vec!["--config", "/nonexistent/run.toml", "gradcheck"],
    ] {
        let out = c3g(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = c3g(&["eval-nvs", "--ckpt", p(&tmp.path().join("missing.bin")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_dataset_pairs_and_one_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("scene.cfg");
    std::fs::write(&spec, "n_objects = 2\nn_views = 6\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--spec", p(&spec), "--out", p(&a), "--seed", "7"]);
    ok(&["synth", "--spec", p(&spec), "--out", p(&b), "--seed", "7"]);
    let ds = dataset_import(&a).unwrap();
    assert_eq!((ds.seed, ds.spec.n_objects, ds.views.len()), (7, 2, 6));
    assert_eq!(read_cameras(&a.join("cams.txt")).unwrap().len(), 6);
    let pairs = std::fs::read_to_string(a.join("pairs.txt")).unwrap();
    assert_eq!(pairs.lines().count(), 8);
    for f in ["manifest.txt", "pairs.txt", "cams.txt", "views/0003.ppm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifests = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "run.toml")
        .count();
    assert_eq!(manifests, 1);
    let m: toml::Table = std::fs::read_to_string(a.join("run.toml")).unwrap().parse().unwrap();
    assert_eq!(m["seed"].as_integer(), Some(7));
    assert!(m["command"].as_str().unwrap().contains("synth"));
}

#[test]
fn config_file_and_flags_follow_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[data]\nscene_seed = 3\n").unwrap();
    let out = tmp.path().join("d");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_c3g"));
    let status = cmd
        .args(["--config", p(&cfg), "--set", "scene.n_views=4", "synth", "--out", p(&out)])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let ds = dataset_import(&out).unwrap();
    assert_eq!((ds.seed, ds.views.len()), (3, 4));
    let m: toml::Table = std::fs::read_to_string(out.join("run.toml")).unwrap().parse().unwrap();
    assert_eq!(m["config_path"].as_str(), Some(p(&cfg)));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let out2 = tmp.path().join("e");
    let status = Command::new(env!("CARGO_BIN_EXE_c3g"))
        .args(["--config", p(&cfg), "synth", "--out", p(&out2), "--seed", "5"])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(dataset_import(&out2).unwrap().seed, 5);
}

#[test]
fn trained_pipeline_commands() {
    let t = trained();
    let ckpt = t.run.join("c3g.bin");
    let fckpt = t.run.join("c3gf.bin");
    let m: toml::Table = std::fs::read_to_string(t.run.join("run.toml")).unwrap().parse().unwrap();
    assert_eq!(m["checkpoints"].as_table().unwrap().len(), 2);
    let model: C3g<f32> = load_c3g(&ckpt).unwrap();
    assert_eq!(model.config.n_queries, 8);

    // Rendering is a pure function of its inputs.
    let pose = format!("{}:3", p(&t.data.join("cams.txt")));
    let (r1, r2) = (t.run.join("r1.ppm"), t.run.join("r2.ppm"));
    for out in [&r1, &r2] {
        ok(&["render", "--ckpt", p(&ckpt), "--views", p(&t.data), "--pose", &pose, "--out", p(out)]);
    }
    let bytes = std::fs::read(&r1).unwrap();
    assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(bytes, std::fs::read(&r2).unwrap());

    let feats = t.run.join("f.ppm");
    let raw = t.run.join("f.bin");
    ok(&[
        "render-features", "--ckpt", p(&ckpt), "--fckpt", p(&fckpt), "--views", p(&t.data), "--pose", &pose, "--out",
        p(&feats), "--raw", p(&raw),
    ]);
    assert!(feats.exists() && raw.exists());

    let attn = t.run.join("attn");
    ok(&["attn", "--ckpt", p(&ckpt), "--views", p(&t.data), "--gaussians", "0,5", "--out", p(&attn)]);
    for f in ["g000_v0.ppm", "g000_v1.ppm", "g005_v0.ppm", "g005_v1.ppm"] {
        let bytes = std::fs::read(attn.join(f)).unwrap();
        assert!(bytes.starts_with(b"P6\n64 64\n255\n"), "{f}");
    }

    let tto = t.run.join("tto");
    ok(&["tto", "--ckpt", p(&ckpt), "--views", p(&t.data), "--out", p(&tto)]);
    let s = summary(&tto);
    assert!(s.iter().any(|(k, v)| k == "gaussians_before" && *v == 8.0));

    let pose_dir = t.run.join("pose");
    ok(&[
        "refine-pose", "--gaussians", p(&tto.join("gaussians_tto.bin")), "--views", p(&t.data), "--target", "3",
        "--out", p(&pose_dir),
    ]);
    let line = std::fs::read_to_string(pose_dir.join("pose.txt")).unwrap();
    parse_camera_line(line.trim()).unwrap();
    let s = summary(&pose_dir);
    let before = s.iter().find(|(k, _)| k == "rotation_deg_before").unwrap().1;
    assert!((before - 5.0).abs() < 1e-6, "{before}");

    let nvs = t.run.join("nvs");
    ok(&["eval-nvs", "--ckpt", p(&ckpt), "--data", p(&t.data), "--out", p(&nvs)]);
    let keys: Vec<String> = summary(&nvs).into_iter().map(|(k, _)| k).collect();
    assert_eq!(keys, ["psnr_mean", "psnr_min", "ssim_mean", "gaussians"]);

    let pck = t.run.join("pck");
    ok(&[
        "eval-pck", "--ckpt", p(&ckpt), "--fckpt", p(&fckpt), "--pairs", p(&t.data.join("pairs.txt")), "--out",
        p(&pck),
    ]);
    let keys: Vec<String> = summary(&pck).into_iter().map(|(k, _)| k).collect();
    for bin in ["0-15", "15-30", "30-60", "60-180"] {
        assert!(keys.contains(&format!("lifted.{bin}")), "{keys:?}");
    }
    assert!(keys.contains(&"gain.avg".to_string()));
}

#[test]
fn eval_pck_matches_a_hand_run_on_one_pair() {
    let t = trained();
    let ckpt = t.run.join("c3g.bin");
    let fckpt = t.run.join("c3gf.bin");
    let first = std::fs::read_to_string(t.data.join("pairs.txt")).unwrap().lines().next().unwrap().to_string();
    let one = t.run.join("one.txt");
    std::fs::write(&one, format!("{first}\n")).unwrap();
    let out = t.run.join("pck1");
    ok(&[
        "eval-pck", "--ckpt", p(&ckpt), "--fckpt", p(&fckpt), "--pairs", p(&one), "--views", p(&t.data), "--out",
        p(&out),
    ]);
    let s = summary(&out);
    let get = |k: &str| s.iter().find(|(n, _)| n == k).unwrap().1;

    let model: C3g<f32> = load_c3g(&ckpt).unwrap();
    let (fdec, _): (FeatureDecoder<f32>, String) = load_c3gf(&fckpt).unwrap();
    let ds = dataset_import(&t.data).unwrap();
    let sc = TrainScene::new(ds.scene().unwrap(), held_out_indices(ds.spec.n_views, 2)).unwrap();
    let (a, b) = first.split_once('|').unwrap();
    let pair = ViewPair {
        scene: 0,
        a: parse_camera_line(a).unwrap(),
        b: parse_camera_line(b).unwrap(),
    };
    let pipe = build_pipeline(&model.config, 2).unwrap();
    let lifted = lift_scene(&pipe, &model, &fdec, &sc, 0, &sc.eval_inputs(2).unwrap(), 0.3, 0).unwrap();
    let seeds = (noise_seed(0, 0, 0, 0), noise_seed(0, 0, 0, 1));
    let score = score_pair(&sc, &lifted, &pair, model.config.patch, 0.3, seeds, &MatchConfig::default()).unwrap();
    assert!((get("raw.avg") - score.raw).abs() < 1e-6);
    assert!((get("lifted.avg") - score.lifted).abs() < 1e-6);
    assert!((get("gain.avg") - (score.lifted - score.raw)).abs() < 1e-6);
}

#[test]
fn gradcheck_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--scenes", "2", "--out", p(tmp.path())]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("gates passed"));
    assert!(tmp.path().join("metrics.txt").exists() && tmp.path().join("run.toml").exists());
}
