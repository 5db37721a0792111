//! Parameter counts, analytic FLOPs, latency and a quadratic attention baseline
//! for linear-vs-quadratic scaling runs.
//!
//! FLOPs are `2 x` multiply-adds. Only convolutions, linear projections and the
//! selective scan are counted; norms, activations and gating are ignored.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::{vss_block_forward, Model, ModelConfig, ResMode, ScanMode, VssBlock};
use crate::numerics::kernels::{dot, linear_fwd};
use crate::scalar::Scalar;
use crate::ssm::uniform;
use crate::tensor::Tensor;

/// Multiply-adds per (token, channel, state) and direction: discretization
/// (exp and the input product), the recurrence and the readout.
pub const C_SCAN: u64 = 9;

/// `(output frames, H, W)` used when the footprint is reported; each output
/// frame costs one full window of `cfg.window` input frames.
pub const REFERENCE_DIMS: (usize, usize, usize) = (1, 270, 480);

/// Side length of the square frames used for scaling runs.
pub const SCALING_SIDE: usize = 32;

pub fn count_params<S: Scalar>(model: &Model<S>) -> usize {
    model.num_params()
}

/// FLOPs grouped by kind, for one fused output frame and for a whole clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopEstimate {
    pub conv: u64,
    pub projection: u64,
    pub scan: u64,
    /// One sliding window producing one fused frame.
    pub per_frame: u64,
    /// `frames * per_frame`.
    pub total: u64,
    pub frames: usize,
}

impl FlopEstimate {
    fn add(&mut self, other: &FlopEstimate) {
        self.conv += other.conv;
        self.projection += other.projection;
        self.scan += other.scan;
    }
}

/// `2 * k_elems * c_in * c_out * positions`.
pub fn conv_flops(k_elems: usize, c_in: usize, c_out: usize, positions: usize) -> u64 {
    2 * (k_elems * c_in * c_out * positions) as u64
}

/// `2 * m * k * n`.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// One VSS block on `l` tokens of width `dim`.
pub fn vss_block_flops(l: usize, dim: usize, d_inner: usize, state_dim: usize, mode: ScanMode) -> FlopEstimate {
    let k: usize = mode.conv_kernel().iter().product();
    let dirs = mode.kinds().len() as u64;
    let projection = 2 * matmul_flops(l, dim, d_inner)
        + 2 * matmul_flops(l, d_inner, state_dim)
        + 2 * matmul_flops(l, d_inner, 1)
        + matmul_flops(l, d_inner, dim);
    FlopEstimate {
        // depthwise: one input channel per output channel
        conv: conv_flops(k, 1, d_inner, l),
        projection,
        scan: C_SCAN * dirs * (l * d_inner * state_dim) as u64,
        ..FlopEstimate::default()
    }
}

/// Analytic FLOPs for fusing a `t x h x w` clip, one window per output frame.
pub fn estimate_flops(cfg: &ModelConfig, t: usize, h: usize, w: usize) -> Result<FlopEstimate> {
    cfg.validate()?;
    if t == 0 || h == 0 || w == 0 {
        return Err(dim_err!("estimate_flops needs positive dims, got ({}, {}, {})", t, h, w));
    }
    let [tt, th, tw] = cfg.tubelet;
    let (tp, hp, wp) = (cfg.window.div_ceil(tt), h.div_ceil(th), w.div_ceil(tw));
    let l = tp * hp * wp;
    let e = cfg.embed_dim;
    let mut est = FlopEstimate::default();

    let mut enc = FlopEstimate { conv: conv_flops(tt * th * tw, cfg.in_channels, e, l), ..FlopEstimate::default() };
    for _ in 0..cfg.depth {
        enc.add(&vss_block_flops(l, e, cfg.d_inner(), cfg.state_dim, cfg.scan_mode));
    }
    est.add(&enc);
    est.add(&enc);

    let c = 2 * e;
    let (l_dec, kt) = match cfg.decoder_resblocks {
        ResMode::Res2d => (hp * wp, 1),
        ResMode::Res3d => (l, 3),
    };
    for _ in 0..cfg.depth {
        est.add(&vss_block_flops(l_dec, c, c * cfg.expand, cfg.state_dim, ScanMode::Spatial4));
    }
    est.conv += cfg.res_blocks as u64 * 2 * conv_flops(kt * 9, c, c, l_dec);
    let shuffled = c / (th * tw);
    est.conv += conv_flops(9, shuffled, cfg.out_channels, hp * th * wp * tw);

    est.per_frame = est.conv + est.projection + est.scan;
    est.total = est.per_frame * t as u64;
    est.conv *= t as u64;
    est.projection *= t as u64;
    est.scan *= t as u64;
    est.frames = t;
    Ok(est)
}

/// Order statistics of wall-clock samples, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Latency {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub samples: Vec<f64>,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

impl Latency {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(contract_err!("latency needs at least one sample"));
        }
        let mut s = samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Ok(Latency { median, p10: percentile(&s, 0.1), p90: percentile(&s, 0.9), samples })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub params: usize,
    pub flops: u64,
    pub latency: Latency,
    /// `[T, H, W]` of the timed input.
    pub input: [usize; 3],
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
}

impl BenchReport {
    pub fn to_record(&self) -> String {
        format!(
            "params={}\nflops={}\nT={}\nH={}\nW={}\nreps={}\nwarmup={}\nthreads={}\nmedian_ms={:.4}\np10_ms={:.4}\np90_ms={:.4}\n",
            self.params,
            self.flops,
            self.input[0],
            self.input[1],
            self.input[2],
            self.reps,
            self.warmup,
            self.threads,
            self.latency.median,
            self.latency.p10,
            self.latency.p90
        )
    }
}

pub const MIN_REPS: usize = 5;

/// Times `fuse_clip(s1, s2)` for `reps` runs after `warmup` untimed ones.
pub fn measure_latency<S: Scalar>(
    model: &Model<S>,
    s1: &Tensor<S>,
    s2: &Tensor<S>,
    reps: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(contract_err!("reps must be >= {}, got {}", MIN_REPS, reps));
    }
    if warmup < 1 {
        return Err(contract_err!("warmup must be >= 1, got {}", warmup));
    }
    let s = s1.shape();
    if s.len() != 4 {
        return Err(dim_err!("latency input must be [T, C, H, W], got {:?}", s));
    }
    let run = || -> Result<()> {
        let y = model.fuse_clip(s1, s2)?;
        if !y.all_finite() {
            return Err(Error::Evaluation("non-finite output during benchmarking".into()));
        }
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport {
        params: model.num_params(),
        flops: estimate_flops(&model.cfg, s[0], s[2], s[3])?.total,
        latency: Latency::from_samples(samples)?,
        input: [s[0], s[2], s[3]],
        reps,
        warmup,
        threads: crate::parallel::requested_threads(),
    })
}

/// Single-head scaled dot-product self-attention weights, each `[D, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
}

impl<S: Scalar> Attention<S> {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        Attention {
            wq: uniform(&mut rng, &[d, d], bound),
            wk: uniform(&mut rng, &[d, d], bound),
            wv: uniform(&mut rng, &[d, d], bound),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// `softmax(Q K^T / sqrt(D)) V` over `x[L, D]`, one score row at a time.
pub fn attention_baseline<S: Scalar>(x: &Tensor<S>, p: &Attention<S>) -> Result<Tensor<S>> {
    let d = p.dim();
    let l = match x.shape() {
        [l, dd] if *dd == d && *l >= 1 => *l,
        s => return Err(dim_err!("attention expects [L >= 1, {}], got {:?}", d, s)),
    };
    let q = linear_fwd(x.data(), p.wq.data(), None, l, d, d);
    let k = linear_fwd(x.data(), p.wk.data(), None, l, d, d);
    let v = linear_fwd(x.data(), p.wv.data(), None, l, d, d);
    let scale = S::lit(1.0 / (d as f64).sqrt());
    let mut out = vec![S::zero(); l * d];
    let mut scores = vec![S::zero(); l];
    for i in 0..l {
        let qi = &q[i * d..(i + 1) * d];
        let mut mx = S::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
            mx = mx.max(*s);
        }
        let mut z = S::zero();
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        let inv = S::one() / z;
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &s) in scores.iter().enumerate() {
            let wgt = s * inv;
            for (o, &vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += wgt * vv;
            }
        }
    }
    Tensor::new(&[l, d], out)
}

/// FLOPs of the attention baseline split into projections and the `L^2` score/apply terms.
pub fn attention_flops(l: usize, d: usize) -> (u64, u64) {
    (3 * matmul_flops(l, d, d), 2 * matmul_flops(l, d, l))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalingRow {
    pub tokens: usize,
    pub ssm_ms: f64,
    pub attn_ms: f64,
    pub ssm_flops: u64,
    pub attn_score_flops: u64,
    pub attn_flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalingReport {
    pub dim: usize,
    pub mode: Option<ScanMode>,
    pub rows: Vec<ScalingRow>,
}

/// Ratio of each row's value to the previous row's.
fn ratios(rows: &[ScalingRow], f: impl Fn(&ScalingRow) -> f64) -> Vec<f64> {
    rows.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect()
}

impl ScalingReport {
    pub fn ssm_time_ratios(&self) -> Vec<f64> {
        ratios(&self.rows, |r| r.ssm_ms)
    }

    pub fn attn_time_ratios(&self) -> Vec<f64> {
        ratios(&self.rows, |r| r.attn_ms)
    }

    pub fn ssm_flop_ratios(&self) -> Vec<f64> {
        ratios(&self.rows, |r| r.ssm_flops as f64)
    }

    pub fn attn_score_flop_ratios(&self) -> Vec<f64> {
        ratios(&self.rows, |r| r.attn_score_flops as f64)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8} {:>12} {:>12} {:>14} {:>14}\n", "L", "ssm_ms", "attn_ms", "ssm_flops", "attn_flops");
        for r in &self.rows {
            s += &format!("{:>8} {:>12.3} {:>12.3} {:>14} {:>14}\n", r.tokens, r.ssm_ms, r.attn_ms, r.ssm_flops, r.attn_flops);
        }
        s
    }

    /// One `key=value` block per row, blank-line separated.
    pub fn to_record(&self) -> String {
        let blocks: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                format!(
                    "tokens={}\ndim={}\nssm_ms={:.4}\nattn_ms={:.4}\nssm_flops={}\nattn_score_flops={}\nattn_flops={}\n",
                    r.tokens, self.dim, r.ssm_ms, r.attn_ms, r.ssm_flops, r.attn_score_flops, r.attn_flops
                )
            })
            .collect();
        blocks.join("\n")
    }
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Latency::from_samples(samples)?.median)
}

/// Times one VSS block on a `(L / 1024, 32, 32)` cube against the attention
/// baseline on the same `L` tokens, both at width `dim`.
pub fn scaling_report<S: Scalar>(lengths: &[usize], dim: usize, mode: ScanMode, reps: usize) -> Result<ScalingReport> {
    if lengths.len() < 3 {
        return Err(contract_err!("scaling needs at least 3 lengths, got {}", lengths.len()));
    }
    if lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(contract_err!("scaling lengths must increase: {:?}", lengths));
    }
    if reps == 0 {
        return Err(contract_err!("reps must be >= 1"));
    }
    let plane = SCALING_SIDE * SCALING_SIDE;
    if let Some(bad) = lengths.iter().find(|&&l| l == 0 || l % plane != 0) {
        return Err(contract_err!("scaling length {} is not a positive multiple of {}", bad, plane));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = VssBlock::<S>::init(dim, dim, crate::ssm::DEFAULT_STATE_DIM, mode, &mut rng);
    let attn = Attention::<S>::init(dim, 1);
    let mut rows = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let t = l / plane;
        let cube: Tensor<S> = uniform(&mut rng, &[dim, t, SCALING_SIDE, SCALING_SIDE], 1.0);
        let tokens: Tensor<S> = uniform(&mut rng, &[l, dim], 1.0);
        vss_block_forward(&cube, &block)?;
        let ssm_ms = median_ms(reps, || vss_block_forward(&cube, &block).map(|_| ()))?;
        let attn_ms = median_ms(reps, || attention_baseline(&tokens, &attn).map(|_| ()))?;
        let (proj, score) = attention_flops(l, dim);
        let f = vss_block_flops(l, dim, dim, crate::ssm::DEFAULT_STATE_DIM, mode);
        rows.push(ScalingRow {
            tokens: l,
            ssm_ms,
            attn_ms,
            ssm_flops: f.conv + f.projection + f.scan,
            attn_score_flops: score,
            attn_flops: proj + score,
        });
    }
    Ok(ScalingReport { dim, mode: Some(mode), rows })
}
