//! Procedural clips with known ground truth for the multi-focus and
//! multi-exposure tasks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::losses::TaskKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BLUR_SIGMA: f64 = 2.0;
pub const DEFAULT_GAIN_LO: f64 = 0.5;
pub const DEFAULT_GAIN_HI: f64 = 2.0;

/// Two degraded views of one ground-truth clip; all `[T, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip<S: Scalar> {
    pub s1: Tensor<S>,
    pub s2: Tensor<S>,
    pub gt: Tensor<S>,
    pub task: TaskKind,
    pub seed: u64,
}

struct Grating {
    freq: f64,
    angle: f64,
    phase: f64,
    speed: f64,
    amp: f64,
}

struct Rect {
    y: f64,
    x: f64,
    h: f64,
    w: f64,
    vy: f64,
    vx: f64,
    base: f64,
    stripe: f64,
    period: f64,
}

/// Moving textured content `[T, 1, H, W]` in `[0, 1]`, a pure function of the arguments.
pub fn gen_content<S: Scalar>(seed: u64, t: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    if t == 0 || h < 8 || w < 8 {
        return Err(dim_err!("content needs T >= 1 and H, W >= 8, got ({}, {}, {})", t, h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<Grating> = (0..2)
        .map(|_| Grating {
            freq: rng.gen_range(0.5..1.3),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            speed: rng.gen_range(-0.6..0.6),
            amp: rng.gen_range(0.1..0.25),
        })
        .collect();
    let ramp = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let n_rect = rng.gen_range(3..=6);
    let (hf, wf) = (h as f64, w as f64);
    let rects: Vec<Rect> = (0..n_rect)
        .map(|_| {
            let rh = rng.gen_range(0.15..0.45) * hf;
            let rw = rng.gen_range(0.15..0.45) * wf;
            Rect {
                y: rng.gen_range(-0.2 * hf..hf),
                x: rng.gen_range(-0.2 * wf..wf),
                h: rh,
                w: rw,
                vy: rng.gen_range(-1.5..1.5),
                vx: rng.gen_range(-1.5..1.5),
                base: rng.gen_range(0.05..0.95),
                stripe: rng.gen_range(-0.3..0.3),
                period: rng.gen_range(1.5..4.0),
            }
        })
        .collect();
    let mut data = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        let tf = ti as f64;
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = 0.5 + ramp.0 * (yf / hf - 0.5) + ramp.1 * (xf / wf - 0.5);
                for gr in &gratings {
                    let proj = xf * gr.angle.cos() + yf * gr.angle.sin();
                    v += gr.amp * (gr.freq * (proj - gr.speed * tf) + gr.phase).sin();
                }
                for r in &rects {
                    let (ry, rx) = (r.y + r.vy * tf, r.x + r.vx * tf);
                    if yf >= ry && yf < ry + r.h && xf >= rx && xf < rx + r.w {
                        let band = (((xf - rx) + (yf - ry)) / r.period).floor() as i64;
                        v = r.base + if band % 2 == 0 { r.stripe } else { 0.0 };
                    }
                }
                data.push(S::lit(v.clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::new(&[t, 1, h, w], data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).round().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one `h x w` plane, replicate borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, &kv)| kv * plane[y * w + clamp(x as isize + j as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, &kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Source 1 is defocused on the left half, source 2 on the right half.
pub fn gen_multifocus<S: Scalar>(seed: u64, t: usize, h: usize, w: usize, blur_sigma: f64) -> Result<SynthClip<S>> {
    if !(blur_sigma > 0.0) {
        return Err(contract_err!("blur sigma must be positive, got {}", blur_sigma));
    }
    let gt = gen_content::<S>(seed, t, h, w)?;
    let half = w / 2;
    let hw = h * w;
    let mut s1 = gt.clone();
    let mut s2 = gt.clone();
    for ti in 0..t {
        let plane: Vec<f64> = gt.data()[ti * hw..(ti + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let blurred = gaussian_blur(&plane, h, w, blur_sigma);
        for y in 0..h {
            for x in 0..w {
                let p = ti * hw + y * w + x;
                if x < half {
                    s1.data_mut()[p] = S::lit(blurred[y * w + x]);
                } else {
                    s2.data_mut()[p] = S::lit(blurred[y * w + x]);
                }
            }
        }
    }
    Ok(SynthClip { s1, s2, gt, task: TaskKind::Mff, seed })
}

/// Under- and over-exposed views: `clip(gt * gain)` per source.
pub fn gen_multiexposure<S: Scalar>(
    seed: u64,
    t: usize,
    h: usize,
    w: usize,
    gain_lo: f64,
    gain_hi: f64,
) -> Result<SynthClip<S>> {
    if !(gain_lo > 0.0 && gain_lo <= 1.0 && gain_hi >= 1.0) {
        return Err(contract_err!("gains must satisfy 0 < lo <= 1 <= hi, got {} and {}", gain_lo, gain_hi));
    }
    let gt = gen_content::<S>(seed, t, h, w)?;
    let (lo, hi) = (S::lit(gain_lo), S::lit(gain_hi));
    let s1 = gt.map(|v| (v * lo).min(S::one()));
    let s2 = gt.map(|v| (v * hi).min(S::one()));
    Ok(SynthClip { s1, s2, gt, task: TaskKind::Mef, seed })
}

/// Clip generator for a trainable task with default degradation settings.
pub fn gen_task_clip<S: Scalar>(task: TaskKind, seed: u64, t: usize, h: usize, w: usize) -> Result<SynthClip<S>> {
    match task {
        TaskKind::Mff => gen_multifocus(seed, t, h, w, DEFAULT_BLUR_SIGMA),
        TaskKind::Mef => gen_multiexposure(seed, t, h, w, DEFAULT_GAIN_LO, DEFAULT_GAIN_HI),
        other => Err(contract_err!("no synthetic generator for task {}", other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_with_three_sigma_radius() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_keeps_constants() {
        let p = vec![0.3; 64];
        assert!(gaussian_blur(&p, 8, 8, 2.0).iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
