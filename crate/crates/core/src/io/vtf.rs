//! VTF tensor files.
//!
//! `"VTF1"`, `u8` dtype (1 = f32), `u8` rank, `rank x u32` dims, then the
//! row-major `f32` payload. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTF1";
pub const DTYPE_F32: u8 = 1;

pub fn to_bytes<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(format_err!("rank {} does not fit in a VTF header", t.ndim()));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| format_err!("dimension {} does not fit in u32", d))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes<S: Scalar>(buf: &[u8]) -> Result<Tensor<S>> {
    if buf.len() < 6 {
        return Err(format_err!("VTF header truncated: expected at least 6 bytes, found {}", buf.len()));
    }
    if &buf[..4] != MAGIC {
        return Err(format_err!("bad VTF magic {:?}, expected \"VTF1\"", String::from_utf8_lossy(&buf[..4])));
    }
    if buf[4] != DTYPE_F32 {
        return Err(format_err!("unsupported VTF dtype code {}", buf[4]));
    }
    let nd = buf[5] as usize;
    let header = 6 + 4 * nd;
    if buf.len() < header {
        return Err(format_err!("VTF dims truncated: expected {} header bytes, found {}", header, buf.len()));
    }
    let shape: Vec<usize> = buf[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err!("VTF dims {:?} overflow", shape))?;
    let expected = n.checked_mul(4).ok_or_else(|| format_err!("VTF dims {:?} overflow", shape))?;
    let actual = buf.len() - header;
    if actual != expected {
        let what = if actual < expected { "truncated" } else { "has trailing bytes" };
        return Err(format_err!("VTF payload {}: expected {} bytes, found {}", what, expected, actual));
    }
    let data = buf[header..]
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_vtf<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    fs::write(path, to_bytes(t)?)?;
    Ok(())
}

pub fn read_vtf<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    from_bytes(&fs::read(path)?)
}
