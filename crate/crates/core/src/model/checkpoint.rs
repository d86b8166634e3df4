//! `c3g v1` and `c3gf v1` checkpoints: one header line of `key=value`
//! tokens, a `blocks <count>` line, then per block a `name <name>` line and
//! an `ndarray v1` payload. Blocks follow parameter declaration order.

use std::collections::HashMap;
use std::io::{BufRead, Cursor, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::real::Real;
use crate::scene::io::write_atomic;
use crate::tensor::io::{read_array, read_line, write_array};
use crate::tensor::ParamSet;

use super::lift::{FeatureConfig, FeatureDecoder};
use super::{C3g, ModelConfig, ModelError};

/// SHA-256 of a file, as lowercase hex.
pub fn content_hash(path: &Path) -> Result<String, ModelError> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_tokens(c: &ModelConfig) -> Vec<String> {
    let [x, y, z] = c.pos_center;
    vec![
        format!("N={}", c.n_queries),
        format!("d={}", c.dim),
        format!("L={}", c.layers),
        format!("heads={}", c.heads),
        format!("patch={}", c.patch),
        format!("v_max={}", c.v_max),
        format!("grid={}x{}", c.grid_h, c.grid_w),
        format!("pos_scale={}", c.pos_scale),
        format!("pos_center={x},{y},{z}"),
        format!("init_log_scale={}", c.init_log_scale),
        format!("init_spread={}", c.init_spread),
    ]
}

struct Header(HashMap<String, String>);

impl Header {
    fn parse(line: &str, magic: &str) -> Result<Self, ModelError> {
        let mut it = line.split(' ');
        if it.next() != Some(magic) || it.next() != Some("v1") {
            return Err(ModelError::Format(format!("expected a `{magic} v1` header, got `{line}`")));
        }
        let mut map = HashMap::new();
        for tok in it {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| ModelError::Format(format!("bad header token `{tok}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Header(map))
    }

    fn raw(&self, key: &str) -> Result<&str, ModelError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ModelError::Format(format!("header lacks `{key}`")))
    }

    fn get<V: std::str::FromStr>(&self, key: &str) -> Result<V, ModelError> {
        let s = self.raw(key)?;
        s.parse()
            .map_err(|_| ModelError::Format(format!("bad value `{s}` for `{key}`")))
    }

    fn model(&self) -> Result<ModelConfig, ModelError> {
        let (gh, gw) = self
            .raw("grid")?
            .split_once('x')
            .ok_or_else(|| ModelError::Format("bad grid".into()))?;
        let center: Vec<f64> = self
            .raw("pos_center")?
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::Format("bad pos_center".into()))?;
        let pos_center: [f64; 3] = center
            .try_into()
            .map_err(|_| ModelError::Format("pos_center needs 3 values".into()))?;
        let c = ModelConfig {
            n_queries: self.get("N")?,
            dim: self.get("d")?,
            layers: self.get("L")?,
            heads: self.get("heads")?,
            patch: self.get("patch")?,
            v_max: self.get("v_max")?,
            grid_h: gh.parse().map_err(|_| ModelError::Format("bad grid".into()))?,
            grid_w: gw.parse().map_err(|_| ModelError::Format("bad grid".into()))?,
            pos_scale: self.get("pos_scale")?,
            pos_center,
            init_log_scale: self.get("init_log_scale")?,
            init_spread: self.get("init_spread")?,
        };
        c.validate()?;
        Ok(c)
    }
}

fn write_blocks<T: Real>(out: &mut Vec<u8>, params: &ParamSet<T>) -> Result<(), ModelError> {
    writeln!(out, "blocks {}", params.len())?;
    for (name, a) in params.iter() {
        writeln!(out, "name {name}")?;
        write_array(out, a)?;
    }
    Ok(())
}

fn read_blocks<T: Real, R: BufRead>(r: &mut R) -> Result<ParamSet<T>, ModelError> {
    let line = read_line(r)?;
    let count: usize = line
        .strip_prefix("blocks ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ModelError::Format(format!("expected `blocks <count>`, got `{line}`")))?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let line = read_line(r)?;
        let name = line
            .strip_prefix("name ")
            .ok_or_else(|| ModelError::Format(format!("expected `name <name>`, got `{line}`")))?;
        if params.contains(name) {
            return Err(ModelError::Format(format!("duplicate block `{name}`")));
        }
        params.insert(name, read_array(r)?);
    }
    Ok(params)
}

/// Every reference array must be present with the same shape, and nothing else.
fn check_against<T: Real>(got: &ParamSet<T>, reference: &ParamSet<T>) -> Result<(), ModelError> {
    for (name, a) in reference.iter() {
        let b = got
            .get(name)
            .ok_or_else(|| ModelError::Format(format!("missing block `{name}`")))?;
        if a.shape() != b.shape() {
            return Err(ModelError::Format(format!(
                "block `{name}` has shape {:?}, expected {:?}",
                b.shape(),
                a.shape()
            )));
        }
    }
    if got.len() != reference.len() {
        return Err(ModelError::Format("unexpected extra blocks".into()));
    }
    Ok(())
}

pub fn encode_c3g<T: Real>(model: &C3g<T>) -> Result<Vec<u8>, ModelError> {
    let mut out = Vec::new();
    writeln!(out, "c3g v1 {}", config_tokens(&model.config).join(" "))?;
    write_blocks(&mut out, &model.params)?;
    Ok(out)
}

pub fn decode_c3g<T: Real>(bytes: &[u8]) -> Result<C3g<T>, ModelError> {
    let mut r = Cursor::new(bytes);
    let header = Header::parse(&read_line(&mut r)?, "c3g")?;
    let config = header.model()?;
    let params = read_blocks(&mut r)?;
    let reference = C3g::<T>::init(config.clone(), 0)?;
    check_against(&params, &reference.params)?;
    // Restore declaration order.
    let mut ordered = ParamSet::new();
    for name in reference.params.names() {
        ordered.insert(name, params.expect(name).clone());
    }
    Ok(C3g { config, params: ordered })
}

/// Write atomically; returns the content hash of the new file.
pub fn save_c3g<T: Real>(path: &Path, model: &C3g<T>) -> Result<String, ModelError> {
    let bytes = encode_c3g(model)?;
    write_atomic(path, &bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn load_c3g<T: Real>(path: &Path) -> Result<C3g<T>, ModelError> {
    decode_c3g(&std::fs::read(path)?)
}

/// Write atomically, recording the parent checkpoint hash; returns the
/// content hash of the new file.
pub fn save_c3gf<T: Real>(path: &Path, decoder: &FeatureDecoder<T>, parent_hash: &str) -> Result<String, ModelError> {
    let mut out = Vec::new();
    let mut tokens = vec![
        format!("parent={parent_hash}"),
        format!("fdim={}", decoder.config.dim),
        format!("bypass={}", u8::from(decoder.config.bypass)),
        format!("residual={}", u8::from(decoder.config.residual)),
    ];
    tokens.extend(config_tokens(&decoder.model));
    writeln!(out, "c3gf v1 {}", tokens.join(" "))?;
    write_blocks(&mut out, &decoder.params)?;
    write_atomic(path, &out)?;
    Ok(hex(&Sha256::digest(&out)))
}

/// Feature decoder and the hash of the Gaussian decoder it was trained against.
pub fn load_c3gf<T: Real>(path: &Path) -> Result<(FeatureDecoder<T>, String), ModelError> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    let header = Header::parse(&read_line(&mut r)?, "c3gf")?;
    let model = header.model()?;
    let flag = |k: &str| -> Result<bool, ModelError> { Ok(header.get::<u8>(k)? != 0) };
    let config = FeatureConfig {
        dim: header.get("fdim")?,
        bypass: flag("bypass")?,
        residual: flag("residual")?,
    };
    let parent = header.raw("parent")?.to_string();
    let params = read_blocks(&mut r)?;
    let shell = C3g::<T>::init(model.clone(), 0)?;
    let reference = FeatureDecoder::init_from_decoder(&shell, config.clone(), 0)?;
    check_against(&params, &reference.params)?;
    Ok((FeatureDecoder { model, config, params }, parent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_queries: 5,
            dim: 8,
            layers: 1,
            heads: 2,
            patch: 4,
            v_max: 2,
            grid_h: 2,
            grid_w: 3,
            pos_scale: 3.5,
            pos_center: [0.1, -0.25, 1.75],
            init_log_scale: -1.5,
            init_spread: 0.05,
        }
    }

    #[test]
    fn c3g_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.c3g");
        let m = C3g::<f32>::init(small(), 3).unwrap();
        let h = save_c3g(&path, &m).unwrap();
        assert_eq!(h, content_hash(&path).unwrap());
        assert_eq!(h.len(), 64);
        let back: C3g<f32> = load_c3g(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn c3gf_round_trip_keeps_parent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.c3gf");
        let m = C3g::<f32>::init(small(), 3).unwrap();
        let f = FeatureDecoder::init_from_decoder(&m, FeatureConfig::new(6), 1).unwrap();
        save_c3gf(&path, &f, "abc123").unwrap();
        let (back, parent) = load_c3gf::<f32>(&path).unwrap();
        assert_eq!(parent, "abc123");
        assert_eq!(back, f);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let m = C3g::<f32>::init(small(), 3).unwrap();
        let bytes = encode_c3g(&m).unwrap();
        assert!(decode_c3g::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[5] = b'2';
        assert!(decode_c3g::<f32>(&bad).is_err());
        let at = bytes.windows(12).position(|w| w == b"name queries").unwrap();
        let mut renamed = bytes.clone();
        renamed[at + 11] = b'5';
        assert!(decode_c3g::<f32>(&renamed).is_err());
    }
}
