//! Multi-direction scan kernels used by the graph.
//!
//! The transition `exp(ΔA)` and input term `ΔBu` depend only on the token, not
//! on the traversal, so they are formed once and shared by every direction.
//! Each direction then runs a pure multiply-add recurrence, reading positions
//! in `order.perm` sequence and writing outputs back at the token's own row.

use crate::numerics::kernels::dot;
use crate::scalar::Scalar;
use crate::scan::ScanOrder;

/// Borrowed operands of a selective scan over `l` tokens, `d` channels, `n` states.
#[derive(Clone, Copy)]
pub struct ScanOperands<'a, S> {
    /// `[l, d]`
    pub u: &'a [S],
    /// `[l, d]`, strictly positive
    pub delta: &'a [S],
    /// Continuous state matrix diagonal `[d, n]`, strictly negative.
    pub a: &'a [S],
    /// `[l, n]`
    pub b: &'a [S],
    /// `[l, n]`
    pub c: &'a [S],
    /// `[d]`
    pub d_skip: &'a [S],
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

/// Token-wise discretized terms, both `[l, d, n]`.
pub struct Discrete<S> {
    pub a_bar: Vec<S>,
    pub bu: Vec<S>,
}

pub fn discretize_tokens<S: Scalar>(op: &ScanOperands<'_, S>) -> Discrete<S> {
    let ScanOperands { u, delta, a, b, l, d, n, .. } = *op;
    let mut a_bar = vec![S::zero(); l * d * n];
    let mut bu = vec![S::zero(); l * d * n];
    for tok in 0..l {
        let br = &b[tok * n..(tok + 1) * n];
        for ch in 0..d {
            let dl = delta[tok * d + ch];
            let du = dl * u[tok * d + ch];
            let base = (tok * d + ch) * n;
            let ar = &a[ch * n..(ch + 1) * n];
            for k in 0..n {
                a_bar[base + k] = (dl * ar[k]).exp();
                bu[base + k] = du * br[k];
            }
        }
    }
    Discrete { a_bar, bu }
}

/// Adds one direction's `<C, h>` readout into `y[l, d]`; the skip term is left to the caller.
pub fn scan_direction<S: Scalar>(disc: &Discrete<S>, c: &[S], order: &ScanOrder, d: usize, n: usize, y: &mut [S]) {
    let dn = d * n;
    let mut h = vec![S::zero(); dn];
    for (i, &tok) in order.perm.iter().enumerate() {
        if i % order.segment == 0 {
            h.iter_mut().for_each(|v| *v = S::zero());
        }
        let ab = &disc.a_bar[tok * dn..(tok + 1) * dn];
        let bu = &disc.bu[tok * dn..(tok + 1) * dn];
        for ((hv, &a), &b) in h.iter_mut().zip(ab).zip(bu) {
            *hv = a * *hv + b;
        }
        let cr = &c[tok * n..(tok + 1) * n];
        let yr = &mut y[tok * d..(tok + 1) * d];
        for (ch, o) in yr.iter_mut().enumerate() {
            let hr = &h[ch * n..(ch + 1) * n];
            *o += dot(cr, hr);
        }
    }
}

/// Gradient partials of one direction w.r.t. the shared discrete terms and `C`.
pub struct DirectionGrads<S> {
    pub g_a_bar: Vec<S>,
    pub g_bu: Vec<S>,
    pub gc: Vec<S>,
}

pub fn scan_direction_bwd<S: Scalar>(
    disc: &Discrete<S>,
    c: &[S],
    order: &ScanOrder,
    gy: &[S],
    d: usize,
    n: usize,
) -> DirectionGrads<S> {
    let l = order.perm.len();
    let mut out = DirectionGrads { g_a_bar: vec![S::zero(); l * d * n], g_bu: vec![S::zero(); l * d * n], gc: vec![S::zero(); l * n] };
    let mut hs = Vec::new();
    scan_direction_bwd_into(disc, c, order, gy, d, n, &mut hs, &mut out);
    out
}

/// Like [`scan_direction_bwd`] but adds into `out`; `hs` is scratch space.
///
/// Each entry of `out` receives exactly one addition per call, so accumulating
/// directions in sequence matches summing separately computed partials in the same order.
#[allow(clippy::too_many_arguments)]
pub fn scan_direction_bwd_into<S: Scalar>(
    disc: &Discrete<S>,
    c: &[S],
    order: &ScanOrder,
    gy: &[S],
    d: usize,
    n: usize,
    hs: &mut Vec<S>,
    out: &mut DirectionGrads<S>,
) {
    let dn = d * n;
    let l = order.perm.len();
    hs.clear();
    hs.resize(l * dn, S::zero());
    // replay the recurrence, keeping every state in sequence order
    for (i, &tok) in order.perm.iter().enumerate() {
        let ab = &disc.a_bar[tok * dn..(tok + 1) * dn];
        let bu = &disc.bu[tok * dn..(tok + 1) * dn];
        let (done, rest) = hs.split_at_mut(i * dn);
        let cur = &mut rest[..dn];
        if i % order.segment == 0 {
            cur.copy_from_slice(bu);
        } else {
            let prev = &done[(i - 1) * dn..];
            for (((h, &a), &p), &b) in cur.iter_mut().zip(ab).zip(prev).zip(bu) {
                *h = a * p + b;
            }
        }
    }
    let mut carry = vec![S::zero(); dn];
    let mut gh = vec![S::zero(); dn];
    let mut gcl = vec![S::zero(); n];
    for i in (0..l).rev() {
        let tok = order.perm[i];
        let cr = &c[tok * n..(tok + 1) * n];
        let gyr = &gy[tok * d..(tok + 1) * d];
        let hr = &hs[i * dn..(i + 1) * dn];
        gcl.iter_mut().for_each(|v| *v = S::zero());
        for (ch, &g) in gyr.iter().enumerate() {
            let span = ch * n..(ch + 1) * n;
            let (ghc, cac, hc) = (&mut gh[span.clone()], &carry[span.clone()], &hr[span]);
            for k in 0..n {
                gcl[k] += g * hc[k];
                ghc[k] = cac[k] + g * cr[k];
            }
        }
        for (o, &v) in out.gc[tok * n..(tok + 1) * n].iter_mut().zip(&gcl) {
            *o += v;
        }
        for (o, &v) in out.g_bu[tok * dn..(tok + 1) * dn].iter_mut().zip(&gh) {
            *o += v;
        }
        if i % order.segment == 0 {
            carry.iter_mut().for_each(|v| *v = S::zero());
        } else {
            let ab = &disc.a_bar[tok * dn..(tok + 1) * dn];
            let prev = &hs[(i - 1) * dn..i * dn];
            let gab = &mut out.g_a_bar[tok * dn..(tok + 1) * dn];
            for j in 0..dn {
                gab[j] += gh[j] * prev[j];
                carry[j] = gh[j] * ab[j];
            }
        }
    }
}

/// Gradients w.r.t. the continuous operands.
pub struct ScanGrads<S> {
    pub gu: Vec<S>,
    pub gdelta: Vec<S>,
    pub ga: Vec<S>,
    pub gb: Vec<S>,
    pub gd: Vec<S>,
}

/// Chains the summed discrete-term gradients back through the discretization,
/// and adds the skip-path terms for `n_dirs` directions.
pub fn discretize_bwd<S: Scalar>(
    op: &ScanOperands<'_, S>,
    disc: &Discrete<S>,
    g_a_bar: &[S],
    g_bu: &[S],
    gy: &[S],
    n_dirs: usize,
) -> ScanGrads<S> {
    let ScanOperands { u, delta, a, b, d_skip, l, d, n, .. } = *op;
    let dirs = S::lit(n_dirs as f64);
    let mut gu = vec![S::zero(); l * d];
    let mut gdelta = vec![S::zero(); l * d];
    let mut ga = vec![S::zero(); d * n];
    let mut gb = vec![S::zero(); l * n];
    let mut gd = vec![S::zero(); d];
    for tok in 0..l {
        let br = &b[tok * n..(tok + 1) * n];
        for ch in 0..d {
            let i = tok * d + ch;
            let (dl, uv, g) = (delta[i], u[i], gy[i]);
            let base = i * n;
            let mut gdl = S::zero();
            let mut gub = S::zero();
            for k in 0..n {
                let ga_t = g_a_bar[base + k] * disc.a_bar[base + k];
                gdl += ga_t * a[ch * n + k];
                ga[ch * n + k] += ga_t * dl;
                let gbu = g_bu[base + k];
                gdl += gbu * uv * br[k];
                gub += gbu * br[k];
                gb[tok * n + k] += gbu * dl * uv;
            }
            gdelta[i] = gdl;
            gu[i] = gub * dl + dirs * g * d_skip[ch];
            gd[ch] += dirs * g * uv;
        }
    }
    ScanGrads { gu, gdelta, ga, gb, gd }
}
