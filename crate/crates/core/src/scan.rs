//! Token traversal orders over a `T x H x W` cube.
//!
//! Eight spatio-temporal trajectories feed the encoder blocks; four per-frame
//! spatial trajectories feed the decoder blocks. Each trajectory is realized
//! as an explicit permutation of the row-major token index `t*H*W + h*W + w`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScanKind {
    SpatialRowFwd,
    SpatialRowBwd,
    SpatialColFwd,
    SpatialColBwd,
    TemporalRowFwd,
    TemporalRowBwd,
    TemporalColFwd,
    TemporalColBwd,
    Decoder2dRowFwd,
    Decoder2dRowBwd,
    Decoder2dColFwd,
    Decoder2dColBwd,
}

impl ScanKind {
    pub const ALL: [ScanKind; 12] = [
        ScanKind::SpatialRowFwd,
        ScanKind::SpatialRowBwd,
        ScanKind::SpatialColFwd,
        ScanKind::SpatialColBwd,
        ScanKind::TemporalRowFwd,
        ScanKind::TemporalRowBwd,
        ScanKind::TemporalColFwd,
        ScanKind::TemporalColBwd,
        ScanKind::Decoder2dRowFwd,
        ScanKind::Decoder2dRowBwd,
        ScanKind::Decoder2dColFwd,
        ScanKind::Decoder2dColBwd,
    ];

    /// The eight spatio-temporal bidirectional trajectories.
    pub const STB8: [ScanKind; 8] = [
        ScanKind::SpatialRowFwd,
        ScanKind::SpatialRowBwd,
        ScanKind::SpatialColFwd,
        ScanKind::SpatialColBwd,
        ScanKind::TemporalRowFwd,
        ScanKind::TemporalRowBwd,
        ScanKind::TemporalColFwd,
        ScanKind::TemporalColBwd,
    ];

    /// Per-frame image-domain trajectories.
    pub const SPATIAL4: [ScanKind; 4] = [
        ScanKind::Decoder2dRowFwd,
        ScanKind::Decoder2dRowBwd,
        ScanKind::Decoder2dColFwd,
        ScanKind::Decoder2dColBwd,
    ];

    pub const TEMPORAL1: [ScanKind; 2] = [ScanKind::TemporalRowFwd, ScanKind::TemporalRowBwd];

    pub fn is_backward(self) -> bool {
        matches!(
            self,
            ScanKind::SpatialRowBwd
                | ScanKind::SpatialColBwd
                | ScanKind::TemporalRowBwd
                | ScanKind::TemporalColBwd
                | ScanKind::Decoder2dRowBwd
                | ScanKind::Decoder2dColBwd
        )
    }

    /// The forward counterpart of a backward kind (identity on forward kinds).
    pub fn forward(self) -> ScanKind {
        match self {
            ScanKind::SpatialRowBwd => ScanKind::SpatialRowFwd,
            ScanKind::SpatialColBwd => ScanKind::SpatialColFwd,
            ScanKind::TemporalRowBwd => ScanKind::TemporalRowFwd,
            ScanKind::TemporalColBwd => ScanKind::TemporalColFwd,
            ScanKind::Decoder2dRowBwd => ScanKind::Decoder2dRowFwd,
            ScanKind::Decoder2dColBwd => ScanKind::Decoder2dColFwd,
            k => k,
        }
    }

    /// Per-frame kinds restart the recurrence at every frame boundary.
    pub fn is_per_frame(self) -> bool {
        matches!(
            self,
            ScanKind::Decoder2dRowFwd | ScanKind::Decoder2dRowBwd | ScanKind::Decoder2dColFwd | ScanKind::Decoder2dColBwd
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanKind::SpatialRowFwd => "spatial-row-fwd",
            ScanKind::SpatialRowBwd => "spatial-row-bwd",
            ScanKind::SpatialColFwd => "spatial-col-fwd",
            ScanKind::SpatialColBwd => "spatial-col-bwd",
            ScanKind::TemporalRowFwd => "temporal-row-fwd",
            ScanKind::TemporalRowBwd => "temporal-row-bwd",
            ScanKind::TemporalColFwd => "temporal-col-fwd",
            ScanKind::TemporalColBwd => "temporal-col-bwd",
            ScanKind::Decoder2dRowFwd => "decoder2d-row-fwd",
            ScanKind::Decoder2dRowBwd => "decoder2d-row-bwd",
            ScanKind::Decoder2dColFwd => "decoder2d-col-fwd",
            ScanKind::Decoder2dColBwd => "decoder2d-col-bwd",
        }
    }
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        ScanKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm || format!("{:?}", k).to_ascii_lowercase() == norm.replace('-', ""))
            .ok_or_else(|| Error::Contract(format!("unknown scan path '{}'", s)))
    }
}

/// A trajectory bound to concrete cube dimensions `(T, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanPath {
    pub kind: ScanKind,
    pub dims: (usize, usize, usize),
}

impl ScanPath {
    pub fn new(kind: ScanKind, t: usize, h: usize, w: usize) -> Self {
        ScanPath { kind, dims: (t, h, w) }
    }

    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Realized permutation plus the recurrence segment length.
///
/// `perm[i]` is the row-major token index visited at sequence step `i`.
/// The hidden state is reset whenever `i % segment == 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub perm: Vec<usize>,
    pub segment: usize,
}

impl ScanOrder {
    /// Plain left-to-right order over `l` positions.
    pub fn identity(l: usize) -> Self {
        ScanOrder { perm: (0..l).collect(), segment: l.max(1) }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

fn check_dims(t: usize, h: usize, w: usize) -> Result<()> {
    if t == 0 || h == 0 || w == 0 {
        return Err(dim_err!("scan dims must be positive, got ({}, {}, {})", t, h, w));
    }
    Ok(())
}

fn forward_order(kind: ScanKind, t: usize, h: usize, w: usize) -> Vec<usize> {
    let idx = |tt: usize, hh: usize, ww: usize| (tt * h + hh) * w + ww;
    let mut out = Vec::with_capacity(t * h * w);
    match kind {
        ScanKind::SpatialRowFwd | ScanKind::Decoder2dRowFwd => {
            for tt in 0..t {
                for hh in 0..h {
                    for ww in 0..w {
                        out.push(idx(tt, hh, ww));
                    }
                }
            }
        }
        ScanKind::SpatialColFwd | ScanKind::Decoder2dColFwd => {
            for tt in 0..t {
                for ww in 0..w {
                    for hh in 0..h {
                        out.push(idx(tt, hh, ww));
                    }
                }
            }
        }
        ScanKind::TemporalRowFwd => {
            for hh in 0..h {
                for ww in 0..w {
                    for tt in 0..t {
                        out.push(idx(tt, hh, ww));
                    }
                }
            }
        }
        ScanKind::TemporalColFwd => {
            for ww in 0..w {
                for hh in 0..h {
                    for tt in 0..t {
                        out.push(idx(tt, hh, ww));
                    }
                }
            }
        }
        _ => unreachable!("forward kinds only"),
    }
    out
}

/// Permutation of length `T*H*W` realizing `path`.
pub fn build_order(path: &ScanPath) -> Result<Vec<usize>> {
    let (t, h, w) = path.dims;
    check_dims(t, h, w)?;
    let fwd = forward_order(path.kind.forward(), t, h, w);
    if !path.kind.is_backward() {
        return Ok(fwd);
    }
    // per-frame paths reset at every frame, so a full reversal reverses each frame
    Ok(fwd.into_iter().rev().collect())
}

type OrderCache = Mutex<HashMap<ScanPath, Arc<ScanOrder>>>;

fn cache() -> &'static OrderCache {
    static CACHE: OnceLock<OrderCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cached [`ScanOrder`] for `path`.
pub fn scan_order(path: &ScanPath) -> Result<Arc<ScanOrder>> {
    if let Some(o) = cache().lock().expect("scan cache poisoned").get(path) {
        return Ok(o.clone());
    }
    let perm = build_order(path)?;
    let (_, h, w) = path.dims;
    let segment = if path.kind.is_per_frame() { h * w } else { perm.len() };
    let order = Arc::new(ScanOrder { perm, segment });
    cache().lock().expect("scan cache poisoned").insert(*path, order.clone());
    Ok(order)
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_cube<S: Scalar>(x: &Tensor<S>, path: &ScanPath) -> Result<usize> {
    let (t, h, w) = path.dims;
    let s = x.shape();
    if s.len() != 4 || s[1] != t || s[2] != h || s[3] != w {
        return Err(dim_err!("tensor {:?} does not match scan dims ({}, {}, {})", s, t, h, w));
    }
    Ok(s[0])
}

/// `x[C,T,H,W]` to `seq[C,L]` where column `i` is the token at `build_order(path)[i]`.
pub fn flatten<S: Scalar>(x: &Tensor<S>, path: &ScanPath) -> Result<Tensor<S>> {
    let c = check_cube(x, path)?;
    let order = scan_order(path)?;
    let l = path.len();
    let src = x.data();
    let mut out = Vec::with_capacity(c * l);
    for ch in 0..c {
        let plane = &src[ch * l..(ch + 1) * l];
        out.extend(order.perm.iter().map(|&p| plane[p]));
    }
    Tensor::new(&[c, l], out)
}

/// Inverse of [`flatten`] for the same path.
pub fn unflatten<S: Scalar>(seq: &Tensor<S>, path: &ScanPath) -> Result<Tensor<S>> {
    let (t, h, w) = path.dims;
    let l = path.len();
    let s = seq.shape();
    if s.len() != 2 || s[1] != l {
        return Err(dim_err!("sequence {:?} does not have length {} for path {}", s, l, path.kind));
    }
    let c = s[0];
    let order = scan_order(path)?;
    let mut out = vec![S::zero(); c * l];
    for ch in 0..c {
        let row = &seq.data()[ch * l..(ch + 1) * l];
        let plane = &mut out[ch * l..(ch + 1) * l];
        for (i, &p) in order.perm.iter().enumerate() {
            plane[p] = row[i];
        }
    }
    Tensor::new(&[c, t, h, w], out)
}

/// Elementwise sum of directional outputs, in list order.
pub fn aggregate<S: Scalar>(outputs: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = outputs.first().ok_or_else(|| dim_err!("aggregate needs at least one direction"))?;
    let mut acc = first.clone();
    for t in &outputs[1..] {
        t.expect_shape(first.shape())?;
        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triples(kind: ScanKind, t: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        build_order(&ScanPath::new(kind, t, h, w))
            .unwrap()
            .into_iter()
            .map(|p| (p / (h * w), (p / w) % h, p % w))
            .collect()
    }

    #[test]
    fn spatial_row_order() {
        assert_eq!(triples(ScanKind::SpatialRowFwd, 1, 2, 2), vec![(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]);
    }

    #[test]
    fn spatial_col_order() {
        assert_eq!(triples(ScanKind::SpatialColFwd, 1, 2, 2), vec![(0, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 1)]);
    }

    #[test]
    fn temporal_row_order() {
        assert_eq!(triples(ScanKind::TemporalRowFwd, 2, 1, 2), vec![(0, 0, 0), (1, 0, 0), (0, 0, 1), (1, 0, 1)]);
    }

    #[test]
    fn decoder_backward_reverses_whole_sequence() {
        let got = triples(ScanKind::Decoder2dRowBwd, 2, 1, 2);
        assert_eq!(got, vec![(1, 0, 1), (1, 0, 0), (0, 0, 1), (0, 0, 0)]);
    }

    #[test]
    fn zero_axis_is_rejected() {
        assert!(build_order(&ScanPath::new(ScanKind::SpatialRowFwd, 0, 2, 2)).is_err());
    }

    #[test]
    fn one_hot_lands_at_expected_index() {
        let path = ScanPath::new(ScanKind::SpatialRowFwd, 1, 2, 2);
        let mut x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        x.data_mut()[2] = 1.0; // (t, h, w) = (0, 1, 0)
        let seq = flatten(&x, &path).unwrap();
        assert_eq!(seq.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn aggregate_cases() {
        let y = Tensor::<f64>::from_fn(&[2, 1, 2, 2], |i| i as f64 - 3.0);
        let eight = aggregate(&vec![y.clone(); 8]).unwrap();
        assert_eq!(eight, y.scale(8.0));
        assert_eq!(aggregate(std::slice::from_ref(&y)).unwrap(), y);
        let mut list = vec![y.clone(), y.scale(-1.0)];
        list.extend(std::iter::repeat_n(Tensor::zeros(y.shape()), 6));
        assert_eq!(aggregate(&list).unwrap().max_abs(), 0.0);
        assert!(aggregate(&[y.clone(), Tensor::zeros(&[1, 1, 2, 2])]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in ScanKind::ALL {
            assert_eq!(k.name().parse::<ScanKind>().unwrap(), k);
        }
    }
}
