//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"MVF1"`, `u32` config entry count, then per entry a `u32`-length-prefixed
//! UTF-8 key and value; `u32` tensor count, then per tensor a `u32`-length-prefixed
//! name, `u8` rank, `rank x u32` dims and the `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVF1";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let pairs = model.cfg.to_pairs();
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let named = model.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        put_str(&mut out, &name);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err!("checkpoint truncated reading {}: need {} bytes at offset {}, file has {}", what, n, self.pos, self.buf.len())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.bytes(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| format_err!("checkpoint {} is not valid UTF-8", what))
    }
}

pub fn from_bytes<S: Scalar>(buf: &[u8]) -> Result<Model<S>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err!("bad checkpoint magic {:?}, expected \"MVF1\"", String::from_utf8_lossy(magic)));
    }
    let n_cfg = r.u32("config count")?;
    let mut pairs = Vec::new();
    for _ in 0..n_cfg {
        let k = r.string("config key")?;
        let v = r.string("config value")?;
        pairs.push((k, v));
    }
    let cfg = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut model = Model::<S>::new(cfg, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let n_t = r.u32("tensor count")? as usize;
    if n_t != expected.len() {
        return Err(format_err!("checkpoint has {} tensors, config implies {}", n_t, expected.len()));
    }
    let mut loaded = Vec::with_capacity(n_t);
    for (want_name, want_shape) in &expected {
        let name = r.string("tensor name")?;
        if &name != want_name {
            return Err(format_err!("checkpoint tensor '{}' found where '{}' was expected", name, want_name));
        }
        let nd = r.bytes(1, "tensor rank")?[0] as usize;
        let shape = (0..nd).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(format_err!("tensor '{}' has shape {:?}, expected {:?}", name, shape, want_shape));
        }
        let n: usize = shape.iter().product();
        let payload = r.bytes(4 * n, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        loaded.push(Tensor::new(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(format_err!("{} trailing bytes after checkpoint", buf.len() - r.pos));
    }
    for (dst, src) in model.tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    Ok(model)
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, model: &Model<S>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    from_bytes(&fs::read(path)?)
}
