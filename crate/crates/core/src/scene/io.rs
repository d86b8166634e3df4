//! Binary PPM images and on-disk datasets.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{generate_scene, SceneError, SceneSpec, SyntheticScene, ViewRecord, BACKGROUND};
use crate::splat::{Camera, DEFAULT_NEAR};
use crate::tensor::io::{read_array, write_array};
use crate::tensor::Array;

fn format_err(path: &Path, reason: impl Into<String>) -> SceneError {
    SceneError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// P6 bytes of an `H x W x 3` image in [0, 1].
pub fn encode_ppm(image: &Array<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Array<f32>, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("magic `{}` is not P6", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad number `{s}`"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let body = bytes.get(pos..pos + w * h * 3).ok_or("truncated pixel data")?;
    Array::new(&[h, w, 3], body.iter().map(|&b| b as f32 / 255.0).collect()).map_err(|e| e.to_string())
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)
}

pub fn write_ppm(path: &Path, image: &Array<f32>) -> Result<(), SceneError> {
    write_atomic(path, &encode_ppm(image))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Array<f32>, SceneError> {
    decode_ppm(&fs::read(path)?).map_err(|r| format_err(path, r))
}

/// Grayscale map in [0, 1] written as a three-channel PPM.
pub fn write_gray_ppm(path: &Path, map: &Array<f32>) -> Result<(), SceneError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let rgb = Array::from_fn(&[h, w, 3], |i| map.data()[i / 3]);
    write_ppm(path, &rgb)
}

/// One `cams.txt` line: rotation (row-major), translation, fx fy cx cy, width height.
pub fn camera_line(c: &Camera) -> String {
    let mut s = String::new();
    for i in 0..3 {
        for j in 0..3 {
            write!(s, "{} ", c.rotation[(i, j)]).unwrap();
        }
    }
    for v in c.translation.iter() {
        write!(s, "{v} ").unwrap();
    }
    write!(s, "{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height).unwrap();
    s
}

pub fn parse_camera_line(line: &str) -> Result<Camera, String> {
    let v: Vec<&str> = line.split_whitespace().collect();
    if v.len() != 18 {
        return Err(format!("expected 18 values, got {}", v.len()));
    }
    let f = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number `{s}`"));
    let u = |s: &str| s.parse::<usize>().map_err(|_| format!("bad size `{s}`"));
    let mut r = [0.0; 9];
    for (k, x) in r.iter_mut().enumerate() {
        *x = f(v[k])?;
    }
    let cam = Camera {
        rotation: Matrix3::from_row_slice(&r),
        translation: Vector3::new(f(v[9])?, f(v[10])?, f(v[11])?),
        fx: f(v[12])?,
        fy: f(v[13])?,
        cx: f(v[14])?,
        cy: f(v[15])?,
        width: u(v[16])?,
        height: u(v[17])?,
        near: DEFAULT_NEAR,
    };
    cam.validate().map_err(|e| e.to_string())?;
    Ok(cam)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>, SceneError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| parse_camera_line(l).map_err(|r| format_err(path, format!("line {}: {r}", i + 1))))
        .collect()
}

fn manifest_text(scene: &SyntheticScene) -> String {
    let mut s = format!("seed = {}\n", scene.seed);
    for line in scene.spec.to_lines() {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

/// Parse `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Write views, depth and id maps, cameras and a manifest; returns the manifest text.
pub fn dataset_export(scene: &SyntheticScene, out: &Path) -> Result<String, SceneError> {
    for sub in ["views", "depth", "ids"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let mut cams = String::new();
    for (k, view) in scene.render_rig().iter().enumerate() {
        write_ppm(&out.join(format!("views/{k:04}.ppm")), &view.image)?;
        let mut buf = Vec::new();
        write_array(&mut buf, &view.depth)?;
        write_atomic(&out.join(format!("depth/{k:04}.bin")), &buf)?;
        let ids = Array::new(
            view.depth.shape(),
            view.ids.iter().map(|&i| if i == BACKGROUND { -1.0 } else { i as f32 }).collect(),
        )?;
        let mut buf = Vec::new();
        write_array(&mut buf, &ids)?;
        write_atomic(&out.join(format!("ids/{k:04}.bin")), &buf)?;
        cams.push_str(&camera_line(&view.camera));
        cams.push('\n');
    }
    write_atomic(&out.join("cams.txt"), cams.as_bytes())?;
    let manifest = manifest_text(scene);
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    Ok(manifest)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub spec: SceneSpec,
    pub views: Vec<ViewRecord>,
}

impl Dataset {
    /// Regenerate the procedural scene this dataset was exported from.
    pub fn scene(&self) -> Result<SyntheticScene, SceneError> {
        generate_scene(&self.spec, self.seed)
    }
}

fn read_payload(path: &Path) -> Result<Array<f32>, SceneError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let a = read_array(&mut r)?;
    if r.fill_buf()?.is_empty() {
        Ok(a)
    } else {
        Err(format_err(path, "trailing bytes"))
    }
}

pub fn dataset_import(dir: &Path) -> Result<Dataset, SceneError> {
    let manifest_path = dir.join("manifest.txt");
    let mut text = String::new();
    fs::File::open(&manifest_path)?.read_to_string(&mut text)?;
    let mut spec = SceneSpec::default();
    let mut seed = None;
    for (k, v) in parse_key_values(&text).map_err(|r| format_err(&manifest_path, r))? {
        if k == "seed" {
            seed = Some(v.parse().map_err(|_| format_err(&manifest_path, "bad seed"))?);
        } else {
            spec.set(&k, &v)?;
        }
    }
    let seed = seed.ok_or_else(|| format_err(&manifest_path, "missing seed"))?;
    let cams = read_cameras(&dir.join("cams.txt"))?;
    let mut views = Vec::with_capacity(cams.len());
    for (k, camera) in cams.into_iter().enumerate() {
        let image = read_ppm(&dir.join(format!("views/{k:04}.ppm")))?;
        let depth = read_payload(&dir.join(format!("depth/{k:04}.bin")))?;
        let ids = read_payload(&dir.join(format!("ids/{k:04}.bin")))?
            .data()
            .iter()
            .map(|&v| if v < 0.0 { BACKGROUND } else { v as u32 })
            .collect();
        views.push(ViewRecord {
            image,
            depth,
            ids,
            camera,
        });
    }
    Ok(Dataset { seed, spec, views })
}
