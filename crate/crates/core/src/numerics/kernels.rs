//! Forward and backward kernels on raw buffers.
//!
//! Feature maps inside the model are channels-last: a `[T, H, W, C]` volume is
//! a `[L, C]` token matrix with `L = T*H*W`. The public channel-first wrappers
//! live in `numerics::mod`.

use crate::scalar::Scalar;

/// Dot product with eight independent partial sums, which lets the compiler vectorize it.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] += x[j] * y[j];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `y[M,N] = x[M,K] * w[K,N] (+ b[N])`.
pub fn linear_fwd<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, m: usize, k: usize, n: usize) -> Vec<S> {
    let mut y = vec![S::zero(); m * n];
    for (xr, yr) in x.chunks_exact(k).zip(y.chunks_exact_mut(n)) {
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (kk, &xv) in xr.iter().enumerate() {
            let wr = &w[kk * n..(kk + 1) * n];
            for (o, &wv) in yr.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    y
}

/// Gradients of `linear_fwd` w.r.t. `x`, `w` and `b`.
pub fn linear_bwd<S: Scalar>(
    gy: &[S],
    x: &[S],
    w: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gx = vec![S::zero(); m * k];
    let mut gw = vec![S::zero(); k * n];
    let mut gb = vec![S::zero(); n];
    for row in 0..m {
        let gyr = &gy[row * n..(row + 1) * n];
        let xr = &x[row * k..(row + 1) * k];
        let gxr = &mut gx[row * k..(row + 1) * k];
        for (o, &g) in gb.iter_mut().zip(gyr) {
            *o += g;
        }
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            gxr[kk] = dot(gyr, wr);
            let xv = xr[kk];
            let gwr = &mut gw[kk * n..(kk + 1) * n];
            for (o, &g) in gwr.iter_mut().zip(gyr) {
                *o += xv * g;
            }
        }
    }
    (gx, gw, gb)
}

/// Layer norm over the last axis of length `c`. Returns `(y, xhat, rstd)`.
pub fn layer_norm_fwd<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], c: usize, eps: S) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / c;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    let inv_c = S::one() / S::lit(c as f64);
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().copied().sum::<S>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (xr[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

pub fn layer_norm_bwd<S: Scalar>(gy: &[S], xhat: &[S], rstd: &[S], gamma: &[S], c: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = gy.len() / c;
    let mut gx = vec![S::zero(); gy.len()];
    let mut gg = vec![S::zero(); c];
    let mut gb = vec![S::zero(); c];
    let inv_c = S::one() / S::lit(c as f64);
    for r in 0..rows {
        let gyr = &gy[r * c..(r + 1) * c];
        let hr = &xhat[r * c..(r + 1) * c];
        let mut sum_g = S::zero();
        let mut sum_gh = S::zero();
        for j in 0..c {
            let gh = gyr[j] * gamma[j];
            sum_g += gh;
            sum_gh += gh * hr[j];
            gg[j] += gyr[j] * hr[j];
            gb[j] += gyr[j];
        }
        for j in 0..c {
            let gh = gyr[j] * gamma[j];
            gx[r * c + j] = rstd[r] * (gh - inv_c * sum_g - hr[j] * inv_c * sum_gh);
        }
    }
    (gx, gg, gb)
}

/// Geometry of a channels-last 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    /// Output extent per axis, or `None` if the kernel does not fit.
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = self.input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.kernel[a] > padded {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Visits every (output position, kernel tap, input position) triple that lands inside the input.
    #[inline]
    fn for_each_tap(&self, out: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let [ti_n, hi_n, wi_n] = self.input;
        let [kt, kh, kw] = self.kernel;
        for to in 0..out[0] {
            for ho in 0..out[1] {
                for wo in 0..out[2] {
                    let opos = (to * out[1] + ho) * out[2] + wo;
                    for a in 0..kt {
                        let ti = (to * self.stride[0] + a) as isize - self.padding[0] as isize;
                        if ti < 0 || ti >= ti_n as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let hi = (ho * self.stride[1] + b) as isize - self.padding[1] as isize;
                            if hi < 0 || hi >= hi_n as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let wi = (wo * self.stride[2] + c) as isize - self.padding[2] as isize;
                                if wi < 0 || wi >= wi_n as isize {
                                    continue;
                                }
                                let ipos = ((ti as usize * hi_n) + hi as usize) * wi_n + wi as usize;
                                f(opos, (a * kh + b) * kw + c, ipos);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense conv: `x[T,H,W,Cin]`, `w[kt,kh,kw,Cin,Cout]`, zero padding.
pub fn conv3d_fwd<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let out = g.output().expect("conv geometry validated by caller");
    let (ci_n, co_n) = (g.c_in, g.c_out);
    let npos = out[0] * out[1] * out[2];
    let mut y = vec![S::zero(); npos * co_n];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(co_n) {
            row.copy_from_slice(b);
        }
    }
    g.for_each_tap(out, |opos, tap, ipos| {
        let yr = &mut y[opos * co_n..(opos + 1) * co_n];
        let xr = &x[ipos * ci_n..(ipos + 1) * ci_n];
        let wbase = tap * ci_n * co_n;
        for (ci, &xv) in xr.iter().enumerate() {
            let wr = &w[wbase + ci * co_n..wbase + (ci + 1) * co_n];
            for (o, &wv) in yr.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    });
    y
}

pub fn conv3d_bwd<S: Scalar>(gy: &[S], x: &[S], w: &[S], g: &ConvGeom) -> (Vec<S>, Vec<S>, Vec<S>) {
    let out = g.output().expect("conv geometry validated by caller");
    let (ci_n, co_n) = (g.c_in, g.c_out);
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); w.len()];
    let mut gb = vec![S::zero(); co_n];
    for row in gy.chunks_exact(co_n) {
        for (o, &v) in gb.iter_mut().zip(row) {
            *o += v;
        }
    }
    g.for_each_tap(out, |opos, tap, ipos| {
        let gyr = &gy[opos * co_n..(opos + 1) * co_n];
        let wbase = tap * ci_n * co_n;
        for ci in 0..ci_n {
            let xv = x[ipos * ci_n + ci];
            let off = wbase + ci * co_n;
            let wr = &w[off..off + co_n];
            gx[ipos * ci_n + ci] += dot(gyr, wr);
            let gwr = &mut gw[off..off + co_n];
            for (o, &gv) in gwr.iter_mut().zip(gyr) {
                *o += xv * gv;
            }
        }
    });
    (gx, gw, gb)
}

/// Depthwise "same" conv: `x[T,H,W,C]`, `w[kt,kh,kw,C]`, odd kernel, stride 1, zero padding.
pub fn dwconv3d_fwd<S: Scalar>(x: &[S], w: &[S], b: &[S], dims: [usize; 3], k: [usize; 3], c: usize) -> Vec<S> {
    let g = ConvGeom { input: dims, kernel: k, stride: [1; 3], padding: [k[0] / 2, k[1] / 2, k[2] / 2], c_in: c, c_out: c };
    let out = g.output().expect("same conv");
    let mut y = vec![S::zero(); x.len()];
    for row in y.chunks_exact_mut(c) {
        row.copy_from_slice(b);
    }
    g.for_each_tap(out, |opos, tap, ipos| {
        let yr = &mut y[opos * c..(opos + 1) * c];
        let xr = &x[ipos * c..(ipos + 1) * c];
        let wr = &w[tap * c..(tap + 1) * c];
        for ((o, &xv), &wv) in yr.iter_mut().zip(xr).zip(wr) {
            *o += xv * wv;
        }
    });
    y
}

pub fn dwconv3d_bwd<S: Scalar>(
    gy: &[S],
    x: &[S],
    w: &[S],
    dims: [usize; 3],
    k: [usize; 3],
    c: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let g = ConvGeom { input: dims, kernel: k, stride: [1; 3], padding: [k[0] / 2, k[1] / 2, k[2] / 2], c_in: c, c_out: c };
    let out = g.output().expect("same conv");
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); w.len()];
    let mut gb = vec![S::zero(); c];
    for row in gy.chunks_exact(c) {
        for (o, &v) in gb.iter_mut().zip(row) {
            *o += v;
        }
    }
    g.for_each_tap(out, |opos, tap, ipos| {
        let gyr = &gy[opos * c..(opos + 1) * c];
        let xr = &x[ipos * c..(ipos + 1) * c];
        let wr = &w[tap * c..(tap + 1) * c];
        let gxr = &mut gx[ipos * c..(ipos + 1) * c];
        for j in 0..c {
            gxr[j] += gyr[j] * wr[j];
        }
        let gwr = &mut gw[tap * c..(tap + 1) * c];
        for j in 0..c {
            gwr[j] += gyr[j] * xr[j];
        }
    });
    (gx, gw, gb)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sobel responses of one `h x w` image with replicate borders. Returns `(gx, gy)`.
pub fn sobel_xy<S: Scalar>(img: &[S], h: usize, w: usize) -> (Vec<S>, Vec<S>) {
    // differences are formed before weighting so constant regions give exact zeros
    let two = S::lit(2.0);
    let mut gx = vec![S::zero(); h * w];
    let mut gy = vec![S::zero(); h * w];
    for i in 0..h {
        let up = clamp_idx(i as isize - 1, h) * w;
        let mid = i * w;
        let dn = clamp_idx(i as isize + 1, h) * w;
        for j in 0..w {
            let l = clamp_idx(j as isize - 1, w);
            let r = clamp_idx(j as isize + 1, w);
            gx[mid + j] = (img[up + r] - img[up + l]) + two * (img[mid + r] - img[mid + l]) + (img[dn + r] - img[dn + l]);
            gy[mid + j] = (img[dn + l] - img[up + l]) + two * (img[dn + j] - img[up + j]) + (img[dn + r] - img[up + r]);
        }
    }
    (gx, gy)
}

/// Gradient magnitude `sqrt(gx^2 + gy^2)` for a stack of `h x w` images.
pub fn sobel_mag_fwd<S: Scalar>(img: &[S], h: usize, w: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(img.len());
    for frame in img.chunks_exact(h * w) {
        let (gx, gy) = sobel_xy(frame, h, w);
        out.extend(gx.iter().zip(&gy).map(|(&a, &b)| (a * a + b * b).sqrt()));
    }
    out
}

/// Backward of `sobel_mag_fwd`; the subgradient at zero magnitude is zero.
pub fn sobel_mag_bwd<S: Scalar>(gout: &[S], img: &[S], mag: &[S], h: usize, w: usize) -> Vec<S> {
    let mut gin = vec![S::zero(); img.len()];
    let hw = h * w;
    for (f, frame) in img.chunks_exact(hw).enumerate() {
        let (gx, gy) = sobel_xy(frame, h, w);
        let gi = &mut gin[f * hw..(f + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let m = mag[f * hw + p];
                if m <= S::zero() {
                    continue;
                }
                let dx = gout[f * hw + p] * gx[p] / m;
                let dy = gout[f * hw + p] * gy[p] / m;
                for a in 0..3 {
                    let r = clamp_idx(i as isize + a as isize - 1, h);
                    for b in 0..3 {
                        let c = clamp_idx(j as isize + b as isize - 1, w);
                        gi[r * w + c] += S::lit(SOBEL_X[a][b]) * dx + S::lit(SOBEL_Y[a][b]) * dy;
                    }
                }
            }
        }
    }
    gin
}

/// SSIM stabilizers for a unit dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Non-overlapping `win x win` tiles of an `h x w` image, as top-left corners.
pub fn tiles(h: usize, w: usize, win: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in (0..=h.saturating_sub(win)).step_by(win.max(1)) {
        for j in (0..=w.saturating_sub(win)).step_by(win.max(1)) {
            if i + win <= h && j + win <= w {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mean tile-wise SSIM of `x` against a fixed target `y`, plus per-pixel
/// gradient of that mean when `want_grad` is set.
pub fn tile_ssim<S: Scalar>(x: &[S], y: &[S], h: usize, w: usize, win: usize, want_grad: bool) -> (S, Vec<S>) {
    let tl = tiles(h, w, win);
    let n = S::lit((win * win) as f64);
    let c1 = S::lit(SSIM_C1);
    let c2 = S::lit(SSIM_C2);
    let mut total = S::zero();
    let mut grad = if want_grad { vec![S::zero(); x.len()] } else { Vec::new() };
    let inv_tiles = S::one() / S::lit(tl.len().max(1) as f64);
    for &(ti, tj) in &tl {
        let idx = |a: usize, b: usize| (ti + a) * w + tj + b;
        let (mut mx, mut my) = (S::zero(), S::zero());
        for a in 0..win {
            for b in 0..win {
                mx += x[idx(a, b)];
                my += y[idx(a, b)];
            }
        }
        mx /= n;
        my /= n;
        let (mut vx, mut vy, mut cxy) = (S::zero(), S::zero(), S::zero());
        for a in 0..win {
            for b in 0..win {
                let dx = x[idx(a, b)] - mx;
                let dy = y[idx(a, b)] - my;
                vx += dx * dx;
                vy += dy * dy;
                cxy += dx * dy;
            }
        }
        vx /= n;
        vy /= n;
        cxy /= n;
        let a1 = S::lit(2.0) * mx * my + c1;
        let a2 = S::lit(2.0) * cxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let two_n = S::lit(2.0) / n;
            for a in 0..win {
                for b in 0..win {
                    let p = idx(a, b);
                    let dy = y[p] - my;
                    let dx = x[p] - mx;
                    let d = two_n * ((my * a2 + a1 * dy) / (b1 * b2) - s * (mx / b1 + dx / b2));
                    grad[p] += d * inv_tiles;
                }
            }
        }
    }
    (total * inv_tiles, grad)
}
