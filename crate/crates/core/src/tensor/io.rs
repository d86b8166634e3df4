//! `ndarray v1` payloads: a UTF-8 header line
//! `ndarray v1 <dtype> <rank> <d0> <d1> ...` followed by little-endian values.

use std::io::{BufRead, Write};

use super::{numel, Array, TensorError};
use crate::real::{DType, Real};

pub fn write_array<T: Real, W: Write>(w: &mut W, a: &Array<T>) -> Result<(), TensorError> {
    let mut header = format!("ndarray v1 {} {}", T::DTYPE.name(), a.rank());
    for d in a.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(a.len() * T::DTYPE.size());
    for &v in a.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_line<R: BufRead>(r: &mut R) -> Result<String, TensorError> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(TensorError::Format("unterminated header".into()));
    }
    line.pop();
    String::from_utf8(line).map_err(|_| TensorError::Format("header is not UTF-8".into()))
}

/// Read one payload, converting the stored dtype to `T`.
pub fn read_array<T: Real, R: BufRead>(r: &mut R) -> Result<Array<T>, TensorError> {
    let line = read_line(r)?;
    let mut it = line.split(' ');
    if it.next() != Some("ndarray") || it.next() != Some("v1") {
        return Err(TensorError::Format(format!("bad header `{line}`")));
    }
    let dtype = it
        .next()
        .and_then(DType::parse)
        .ok_or_else(|| TensorError::Format(format!("bad dtype in `{line}`")))?;
    let rank: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TensorError::Format(format!("bad rank in `{line}`")))?;
    let shape: Vec<usize> = it
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| TensorError::Format(format!("bad extent in `{line}`")))?;
    if shape.len() != rank {
        return Err(TensorError::Format(format!("rank {rank} but {} extents", shape.len())));
    }
    let n = numel(&shape);
    let mut bytes = vec![0u8; n * dtype.size()];
    r.read_exact(&mut bytes)?;
    let data: Vec<T> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    Array::new(&shape, data)
}
