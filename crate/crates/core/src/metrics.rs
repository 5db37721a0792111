//! Fusion quality metrics: SSIM, mutual information, edge-transfer `Q_abf`,
//! and an inter-frame flicker score.
//!
//! Metrics run in `f64` regardless of the model scalar.

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::kernels::{sobel_xy, SSIM_C1, SSIM_C2};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MI_BINS: usize = 256;

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

fn plane<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, Vec<f64>)> {
    match x.shape() {
        [h, w] => Ok((*h, *w, x.data().iter().map(|v| v.as_f64()).collect())),
        s => Err(dim_err!("expected an [H, W] image, got {:?}", s)),
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|j| k[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an `window`-tap Gaussian (sigma 1.5) over valid positions.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, window: usize) -> Result<f64> {
    let (h, w, pa) = plane(a)?;
    let (hb, wb, pb) = plane(b)?;
    if (h, w) != (hb, wb) {
        return Err(dim_err!("ssim operands differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if window == 0 || h < window || w < window {
        return Err(dim_err!("image {}x{} smaller than ssim window {}", h, w, window));
    }
    let k = gaussian_window(window, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mx = filter_valid(&pa, h, w, &k);
    let my = filter_valid(&pb, h, w, &k);
    let mxx = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let myy = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let mxy = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn entropy(counts: &[f64], total: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / total) * (c / total).log2()).sum()
}

/// Mutual information in bits from a `bins x bins` joint histogram on `[0, 1]`.
pub fn mutual_information<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, bins: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err!("mi operands differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.numel() == 0 || bins == 0 {
        return Err(dim_err!("mutual information of an empty image"));
    }
    let mut joint = vec![0.0; bins * bins];
    let mut ha = vec![0.0; bins];
    let mut hb = vec![0.0; bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (i, j) = (bin(x.as_f64(), bins), bin(y.as_f64(), bins));
        joint[i * bins + j] += 1.0;
        ha[i] += 1.0;
        hb[j] += 1.0;
    }
    let n = a.numel() as f64;
    Ok((entropy(&ha, n) + entropy(&hb, n) - entropy(&joint, n)).max(0.0))
}

fn orientation(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 {
        if gy == 0.0 {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2.copysign(gy)
        }
    } else {
        (gy / gx).atan()
    }
}

fn edge_map(p: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel_xy(p, h, w);
    let g = gx.iter().zip(&gy).map(|(&x, &y)| (x * x + y * y).sqrt()).collect();
    let a = gx.iter().zip(&gy).map(|(&x, &y)| orientation(x, y)).collect();
    (g, a)
}

fn transfer(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let g = if gs == 0.0 && gf == 0.0 {
        0.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let a = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
    let qg = QG.0 / (1.0 + (QG.1 * (g - QG.2)).exp());
    let qa = QA.0 / (1.0 + (QA.1 * (a - QA.2)).exp());
    qg * qa
}

/// Edge-transfer fusion quality in `[0, 1]`.
pub fn qabf<S: Scalar>(fused: &Tensor<S>, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<f64> {
    let (h, w, pf) = plane(fused)?;
    let (_, _, p1) = plane(s1)?;
    let (_, _, p2) = plane(s2)?;
    if s1.shape() != fused.shape() || s2.shape() != fused.shape() {
        return Err(dim_err!("qabf operands differ in shape"));
    }
    if h < 3 || w < 3 {
        return Err(dim_err!("qabf needs at least 3x3 images"));
    }
    let (gf, af) = edge_map(&pf, h, w);
    let (g1, a1) = edge_map(&p1, h, w);
    let (g2, a2) = edge_map(&p2, h, w);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h * w {
        num += transfer(g1[i], a1[i], gf[i], af[i]) * g1[i] + transfer(g2[i], a2[i], gf[i], af[i]) * g2[i];
        den += g1[i] + g2[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Mean absolute inter-frame difference of `video[T, H, W]`.
pub fn flicker<S: Scalar>(video: &Tensor<S>) -> Result<f64> {
    let s = video.shape();
    if s.len() != 3 {
        return Err(dim_err!("flicker expects [T, H, W], got {:?}", s));
    }
    if s[0] < 2 {
        return Err(contract_err!("flicker needs at least 2 frames, got {}", s[0]));
    }
    let hw = s[1] * s[2];
    let d = video.data();
    let total: f64 = (hw..d.len()).map(|i| (d[i].as_f64() - d[i - hw].as_f64()).abs()).sum();
    Ok(total / (d.len() - hw) as f64)
}

/// Clip-level summary against both sources.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ssim_s1: f64,
    pub ssim_s2: f64,
    pub ssim_mean: f64,
    /// `MI(F, S1) + MI(F, S2)`
    pub mi: f64,
    pub qabf: f64,
    pub flicker: f64,
    pub frame_ssim: Vec<f64>,
    pub frame_mi: Vec<f64>,
    pub frame_qabf: Vec<f64>,
    /// Per transition; empty for single-frame clips.
    pub frame_flicker: Vec<f64>,
}

impl MetricReport {
    /// `key=value` lines in a fixed order.
    pub fn to_record(&self) -> String {
        format!(
            "ssim_s1={:.6}\nssim_s2={:.6}\nssim={:.6}\nmi={:.6}\nqabf={:.6}\nflicker={:.6}\n",
            self.ssim_s1, self.ssim_s2, self.ssim_mean, self.mi, self.qabf, self.flicker
        )
    }
}

fn frame<S: Scalar>(clip: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
    clip.index0(t)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Metrics of a fused clip `[T, H, W]` against its sources; flicker is 0 for `T = 1`.
pub fn metric_report<S: Scalar>(fused: &Tensor<S>, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<MetricReport> {
    if fused.ndim() != 3 || fused.shape() != s1.shape() || fused.shape() != s2.shape() {
        return Err(dim_err!("metric inputs must share a [T, H, W] shape: {:?}, {:?}, {:?}", fused.shape(), s1.shape(), s2.shape()));
    }
    let t = fused.shape()[0];
    let mut r = MetricReport::default();
    let (mut s1s, mut s2s) = (Vec::new(), Vec::new());
    for ti in 0..t {
        let (f, a, b) = (frame(fused, ti)?, frame(s1, ti)?, frame(s2, ti)?);
        let (x, y) = (ssim(&f, &a, SSIM_WINDOW)?, ssim(&f, &b, SSIM_WINDOW)?);
        s1s.push(x);
        s2s.push(y);
        r.frame_ssim.push(0.5 * (x + y));
        r.frame_mi.push(mutual_information(&f, &a, MI_BINS)? + mutual_information(&f, &b, MI_BINS)?);
        r.frame_qabf.push(qabf(&f, &a, &b)?);
    }
    if t >= 2 {
        let hw = fused.shape()[1] * fused.shape()[2];
        let d = fused.data();
        for ti in 1..t {
            let s: f64 = (0..hw).map(|i| (d[ti * hw + i].as_f64() - d[(ti - 1) * hw + i].as_f64()).abs()).sum();
            r.frame_flicker.push(s / hw as f64);
        }
    }
    r.ssim_s1 = mean(&s1s);
    r.ssim_s2 = mean(&s2s);
    r.ssim_mean = mean(&r.frame_ssim);
    r.mi = mean(&r.frame_mi);
    r.qabf = mean(&r.frame_qabf);
    r.flicker = mean(&r.frame_flicker);
    Ok(r)
}
