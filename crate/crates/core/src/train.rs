//! Toy training on synthetic clips and held-out evaluation.

use crate::error::{contract_err, Error, Result};
use crate::losses::{reference_target, temporal_loss, total_graph, LossBreakdown, LossWeights, TaskKind};
use crate::metrics::{flicker, metric_report, ssim, MetricReport, SSIM_WINDOW};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;
use crate::synth::{gen_task_clip, SynthClip};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DECAY_EVERY: usize = 100;
pub const TOY_SIZE: usize = 32;
pub const TOY_STEPS: usize = 2000;

/// Knobs of a toy run beyond the model config.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    /// Multiplicative decay applied every [`DECAY_EVERY`] steps.
    pub decay: f64,
    /// Clips per optimizer step; gradients are averaged.
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Overrides the task's loss weights.
    pub weights: Option<LossWeights>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { lr: DEFAULT_LR, decay: DEFAULT_DECAY, batch: 1, height: TOY_SIZE, width: TOY_SIZE, weights: None }
    }
}

impl TrainOptions {
    /// Learning rate in effect at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.powi((step / DECAY_EVERY) as i32)
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every tensor in `params` with the matching gradient.
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let upd = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x = S::lit(x.as_f64() - upd);
            }
        }
    }
}

/// Optimizer progress; `history.len() == step`.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub adam: Adam,
    pub history: Vec<LossBreakdown<f64>>,
}

/// One logged step.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown<f64>,
    pub grad_max: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub state: TrainState,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th training clip of a run.
pub fn train_clip_seed(seed: u64, index: u64) -> u64 {
    mix(seed, index)
}

/// Seed of the `index`-th held-out clip; disjoint stream from training seeds.
pub fn eval_clip_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ 0x5EED_0F_E7A1, index.wrapping_add(1 << 40))
}

fn channel_plane<S: Scalar>(clip: &Tensor<S>) -> Result<Tensor<S>> {
    let s = clip.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(contract_err!("expected single-channel [T, 1, H, W] clips, got {:?}", s));
    }
    clip.clone().reshape(&[s[0], s[2], s[3]])
}

fn frames<S: Scalar>(clip: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    Tensor::stack(&(start..start + len).map(|i| clip.index0(i)).collect::<Result<Vec<_>>>()?)
}

/// Loss graph for one training clip of `window + 1` frames: two overlapping
/// windows give two consecutive fused center frames.
pub fn clip_loss_graph<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    vars: &[Var],
    clip: &SynthClip<S>,
    weights: LossWeights,
) -> Result<LossBreakdown<Var>> {
    let w = model.cfg.window;
    let t = clip.s1.shape()[0];
    if t != w + 1 {
        return Err(contract_err!("training clips need window + 1 = {} frames, got {}", w + 1, t));
    }
    let (h, wd) = (clip.s1.shape()[2], clip.s1.shape()[3]);
    let mut outs = Vec::with_capacity(2);
    for start in 0..2 {
        let y = model.forward_graph(g, vars, &frames(&clip.s1, start, w)?, &frames(&clip.s2, start, w)?)?;
        outs.push(g.reshape(y, &[1, h * wd])?);
    }
    let both = g.concat_last(outs[0], outs[1])?;
    let fused = g.reshape(both, &[2, h, wd])?;
    let c = w / 2;
    let s1 = channel_plane(&frames(&clip.s1, c, 2)?)?;
    let s2 = channel_plane(&frames(&clip.s2, c, 2)?)?;
    total_graph(g, clip.task, weights, fused, &s1, &s2)
}

fn read(g: &Graph<impl Scalar>, b: &LossBreakdown<Var>) -> LossBreakdown<f64> {
    LossBreakdown {
        spatial: g.value(b.spatial).item().as_f64(),
        grad: g.value(b.grad).item().as_f64(),
        temp: g.value(b.temp).item().as_f64(),
        total: g.value(b.total).item().as_f64(),
    }
}

/// Adam over the task objective on freshly generated clips, default options.
pub fn train_toy(cfg: ModelConfig, task: TaskKind, steps: usize, seed: u64) -> Result<TrainOutcome<f32>> {
    train_toy_with(cfg, task, steps, seed, &TrainOptions::default(), |_| {})
}

pub fn train_toy_with<S: Scalar>(
    cfg: ModelConfig,
    task: TaskKind,
    steps: usize,
    seed: u64,
    opts: &TrainOptions,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<S>> {
    let model = Model::<S>::new(cfg, seed)?;
    continue_training(model, task, steps, seed, opts, on_step)
}

/// Trains an existing model from a fresh optimizer state.
pub fn continue_training<S: Scalar>(
    mut model: Model<S>,
    task: TaskKind,
    steps: usize,
    seed: u64,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<S>> {
    if steps == 0 {
        return Err(contract_err!("steps must be >= 1"));
    }
    if opts.batch == 0 {
        return Err(contract_err!("batch must be >= 1"));
    }
    let weights = opts.weights.unwrap_or_else(|| LossWeights::for_task(task));
    let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.numel()).collect();
    let mut state = TrainState { step: 0, lr: opts.lr, adam: Adam::new(&sizes), history: Vec::with_capacity(steps) };
    let t = model.cfg.window + 1;
    for step in 0..steps {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut acc = LossBreakdown { spatial: 0.0, grad: 0.0, temp: 0.0, total: 0.0 };
        for b in 0..opts.batch {
            let clip_seed = train_clip_seed(seed, (step * opts.batch + b) as u64);
            let clip = gen_task_clip::<S>(task, clip_seed, t, opts.height, opts.width)?;
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let parts = clip_loss_graph(&model, &mut g, &vars, &clip, weights)?;
            let vals = read(&g, &parts);
            if !vals.total.is_finite() {
                let term = [("spatial", vals.spatial), ("grad", vals.grad), ("temp", vals.temp)]
                    .iter()
                    .find(|(_, v)| !v.is_finite())
                    .map_or("total", |(n, _)| *n);
                let gmax = grads.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                return Err(Error::Evaluation(format!(
                    "non-finite loss at step {step} (term {term}); max |grad| so far {gmax:e}"
                )));
            }
            let gr = g.backward(parts.total)?;
            for (dst, v) in grads.iter_mut().zip(&vars) {
                if let Some(gt) = gr.get(*v) {
                    for (d, s) in dst.iter_mut().zip(gt.data()) {
                        *d += s.as_f64();
                    }
                }
            }
            acc.spatial += vals.spatial;
            acc.grad += vals.grad;
            acc.temp += vals.temp;
            acc.total += vals.total;
        }
        let inv = 1.0 / opts.batch as f64;
        grads.iter_mut().flatten().for_each(|v| *v *= inv);
        let loss = LossBreakdown { spatial: acc.spatial * inv, grad: acc.grad * inv, temp: acc.temp * inv, total: acc.total * inv };
        let grad_max = grads.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if !grad_max.is_finite() {
            return Err(Error::Evaluation(format!("non-finite gradient at step {step}")));
        }
        let lr = opts.lr_at(step);
        state.adam.step(&mut model.tensors_mut(), &grads, lr);
        state.step = step + 1;
        state.lr = lr;
        state.history.push(loss);
        on_step(&StepRecord { step, lr, loss, grad_max });
    }
    Ok(TrainOutcome { model, state })
}

/// Held-out summary, averaged over clips.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub n_clips: usize,
    pub fused_gt_ssim: f64,
    pub s1_gt_ssim: f64,
    pub s2_gt_ssim: f64,
    /// Temporal loss of the fused clip against the task reference.
    pub temporal: f64,
    pub flicker: f64,
    /// Fused-vs-source metrics.
    pub metrics: MetricReport,
    pub per_clip_fused_gt_ssim: Vec<f64>,
}

fn mean_ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let t = a.shape()[0];
    let mut s = 0.0;
    for i in 0..t {
        s += ssim(&a.index0(i)?, &b.index0(i)?, SSIM_WINDOW)?;
    }
    Ok(s / t as f64)
}

/// Fuses `n_clips` held-out clips of `window` frames with sliding windows and scores them.
pub fn evaluate<S: Scalar>(model: &Model<S>, task: TaskKind, n_clips: usize, seed: u64) -> Result<EvalReport> {
    evaluate_sized(model, task, n_clips, seed, TOY_SIZE, TOY_SIZE)
}

pub fn evaluate_sized<S: Scalar>(
    model: &Model<S>,
    task: TaskKind,
    n_clips: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<EvalReport> {
    if n_clips == 0 {
        return Err(contract_err!("n_clips must be >= 1"));
    }
    let t = model.cfg.window.max(2);
    let mut r = EvalReport { n_clips, ..EvalReport::default() };
    let mut metrics = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clip = gen_task_clip::<S>(task, eval_clip_seed(seed, i as u64), t, height, width)?;
        let fused = model.fuse_clip(&clip.s1, &clip.s2)?;
        let fused = channel_plane(&fused)?.map(|v| v.max(S::zero()).min(S::one())).cast::<f64>();
        let (s1, s2, gt) = (
            channel_plane(&clip.s1)?.cast::<f64>(),
            channel_plane(&clip.s2)?.cast::<f64>(),
            channel_plane(&clip.gt)?.cast::<f64>(),
        );
        let fg = mean_ssim(&fused, &gt)?;
        r.per_clip_fused_gt_ssim.push(fg);
        r.fused_gt_ssim += fg;
        r.s1_gt_ssim += mean_ssim(&s1, &gt)?;
        r.s2_gt_ssim += mean_ssim(&s2, &gt)?;
        r.temporal += temporal_loss(&fused, &reference_target(task, &s1, &s2)?)?;
        r.flicker += flicker(&fused)?;
        metrics.push(metric_report(&fused, &s1, &s2)?);
    }
    let n = n_clips as f64;
    r.fused_gt_ssim /= n;
    r.s1_gt_ssim /= n;
    r.s2_gt_ssim /= n;
    r.temporal /= n;
    r.flicker /= n;
    let avg = |f: &dyn Fn(&MetricReport) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    r.metrics = MetricReport {
        ssim_s1: avg(&|m| m.ssim_s1),
        ssim_s2: avg(&|m| m.ssim_s2),
        ssim_mean: avg(&|m| m.ssim_mean),
        mi: avg(&|m| m.mi),
        qabf: avg(&|m| m.qabf),
        flicker: avg(&|m| m.flicker),
        ..MetricReport::default()
    };
    Ok(r)
}
