//! `gset v1` files: a header line `gset v1 <N> <d'>` followed by six
//! `ndarray v1` payloads (positions, log-scales, quaternions, opacity logits,
//! color logits, features). Features are stored as `[N, 0]` when absent.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::real::Real;
use crate::tensor::io::{read_array, read_line, write_array};
use crate::tensor::Array;

use super::{GaussianSet, SplatError};

fn flat<T: Copy, const K: usize>(v: &[[T; K]]) -> Vec<T> {
    v.iter().flat_map(|r| r.iter().copied()).collect()
}

fn rows<T: Real, const K: usize>(a: &Array<T>, n: usize, what: &str) -> Result<Vec<[T; K]>, SplatError> {
    if a.shape() != [n, K] {
        return Err(SplatError::Format(format!("{what} block has shape {:?}, expected [{n}, {K}]", a.shape())));
    }
    Ok(a.data()
        .chunks_exact(K)
        .map(|c| std::array::from_fn(|k| c[k]))
        .collect())
}

pub fn write_gset<T: Real, W: Write>(w: &mut W, g: &GaussianSet<T>) -> Result<(), SplatError> {
    let n = g.len();
    writeln!(w, "gset v1 {n} {}", g.feature_dim)?;
    write_array(w, &Array::new(&[n, 3], flat(&g.positions))?)?;
    write_array(w, &Array::new(&[n, 3], flat(&g.log_scales))?)?;
    write_array(w, &Array::new(&[n, 4], flat(&g.rotations))?)?;
    write_array(w, &Array::new(&[n, 1], g.opacity_logits.clone())?)?;
    write_array(w, &Array::new(&[n, 3], flat(&g.color_logits))?)?;
    write_array(w, &Array::new(&[n, g.feature_dim], g.features.clone())?)?;
    Ok(())
}

pub fn read_gset<T: Real, R: Read>(r: R) -> Result<GaussianSet<T>, SplatError> {
    let mut r = BufReader::new(r);
    let line = read_line(&mut r)?;
    let parts: Vec<&str> = line.split(' ').collect();
    let parsed = match parts.as_slice() {
        ["gset", "v1", n, d] => n.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
        _ => None,
    };
    let (n, d) = parsed.ok_or_else(|| SplatError::Format(format!("bad header `{line}`")))?;
    let positions = rows(&read_array(&mut r)?, n, "position")?;
    let log_scales = rows(&read_array(&mut r)?, n, "log-scale")?;
    let rotations = rows(&read_array(&mut r)?, n, "quaternion")?;
    let opacity: Vec<[T; 1]> = rows(&read_array(&mut r)?, n, "opacity")?;
    let color_logits = rows(&read_array(&mut r)?, n, "color")?;
    let features: Array<T> = read_array(&mut r)?;
    if features.shape() != [n, d] {
        return Err(SplatError::Format(format!("feature block has shape {:?}, expected [{n}, {d}]", features.shape())));
    }
    Ok(GaussianSet {
        positions,
        log_scales,
        rotations,
        opacity_logits: opacity.into_iter().map(|[v]| v).collect(),
        color_logits,
        features: features.into_data(),
        feature_dim: d,
    })
}

pub fn save_gset<T: Real>(path: &Path, g: &GaussianSet<T>) -> Result<(), SplatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gset(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn load_gset<T: Real>(path: &Path) -> Result<GaussianSet<T>, SplatError> {
    read_gset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(feature_dim: usize) -> GaussianSet<f32> {
        let mut g = GaussianSet::default();
        for i in 0..5 {
            let f = i as f32;
            g.push([f, -f, 0.5], [-2.0; 3], [1.0, 0.1 * f, 0.0, 0.0], f - 2.0, [0.3, -0.3, f]);
        }
        if feature_dim > 0 {
            let feats = Array::from_fn(&[5, feature_dim], |k| k as f32 * 0.25);
            g.set_features(&feats).unwrap();
        }
        g
    }

    #[test]
    fn round_trip_with_and_without_features() {
        for d in [0, 4] {
            let g = sample(d);
            let mut buf = Vec::new();
            write_gset(&mut buf, &g).unwrap();
            assert!(buf.starts_with(format!("gset v1 5 {d}\n").as_bytes()));
            let back: GaussianSet<f32> = read_gset(buf.as_slice()).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn rejects_wrong_header() {
        let buf = b"gset v2 1 0\n".to_vec();
        assert!(read_gset::<f32, _>(buf.as_slice()).is_err());
    }
}
