//! Training objective: spatial similarity, Sobel gradient preservation and
//! temporal consistency, weighted per task.
//!
//! Every loss is built on the graph so training and evaluation share one
//! implementation; the plain-tensor functions wrap a no-grad graph.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::numerics::kernels::{self, tiles};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tile size of the multi-exposure structural term.
pub const MEF_WINDOW: usize = 7;
/// Exponent on signal strength when blending source structures.
pub const MEF_STRUCTURE_POWER: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Multi-exposure.
    Mef,
    /// Multi-focus.
    Mff,
    /// Infrared-visible.
    Ivf,
    /// Medical.
    Mvf,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Mef, TaskKind::Mff, TaskKind::Ivf, TaskKind::Mvf];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mef => "mef",
            TaskKind::Mff => "mff",
            TaskKind::Ivf => "ivf",
            TaskKind::Mvf => "mvf",
        }
    }

    /// Whether the per-pixel target is the source maximum (else the mean).
    pub fn uses_max_target(self) -> bool {
        matches!(self, TaskKind::Ivf | TaskKind::Mvf)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mef" => Ok(TaskKind::Mef),
            "mff" => Ok(TaskKind::Mff),
            "ivf" => Ok(TaskKind::Ivf),
            "mvf" => Ok(TaskKind::Mvf),
            _ => Err(Error::Config(format!("unknown task '{s}' (expected mef|mff|ivf|mvf)"))),
        }
    }
}

/// Weights of the gradient (`alpha1`) and temporal (`alpha2`) terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LossWeights {
    pub fn for_task(task: TaskKind) -> Self {
        let (alpha1, alpha2) = match task {
            TaskKind::Mef => (10.0, 5.0),
            TaskKind::Mff => (1.0, 0.5),
            TaskKind::Ivf => (5.0, 5.0),
            TaskKind::Mvf => (1.0, 1.0),
        };
        LossWeights { alpha1, alpha2 }
    }
}

/// Per-term values; `total = spatial + alpha1 * grad + alpha2 * temp`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub spatial: T,
    pub grad: T,
    pub temp: T,
    pub total: T,
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Per-pixel spatial target: elementwise max for IVF/MVF, mean for MEF/MFF.
pub fn reference_target<S: Scalar>(task: TaskKind, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape(s1, s2)?;
    if task.uses_max_target() {
        s1.zip_map(s2, |a, b| a.max(b))
    } else {
        s1.zip_map(s2, |a, b| (a + b) * S::lit(0.5))
    }
}

fn frames_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [f, h, w] => Ok((*f, *h, *w)),
        s => Err(dim_err!("expected [H, W] or [F, H, W], got {:?}", s)),
    }
}

/// Desired multi-exposure image built tile by tile: the strongest source contrast,
/// the power-weighted blend of source structures, and the mean source intensity.
/// Pixels outside whole tiles are left at the mean of the sources.
pub fn mef_desired<S: Scalar>(s1: &Tensor<S>, s2: &Tensor<S>, window: usize) -> Result<Tensor<S>> {
    same_shape(s1, s2)?;
    let (f, h, w) = frames_hw(s1.shape())?;
    if window < 3 || window % 2 == 0 {
        return Err(contract_err!("structural window must be odd and >= 3, got {}", window));
    }
    if window > h || window > w {
        return Err(dim_err!("structural window {} does not fit {}x{}", window, h, w));
    }
    let mut out = reference_target(TaskKind::Mef, s1, s2)?;
    let n = (window * window) as f64;
    let hw = h * w;
    for fi in 0..f {
        let a = &s1.data()[fi * hw..(fi + 1) * hw];
        let b = &s2.data()[fi * hw..(fi + 1) * hw];
        let o = &mut out.data_mut()[fi * hw..(fi + 1) * hw];
        for (ti, tj) in tiles(h, w, window) {
            let pix: Vec<usize> = (0..window).flat_map(|r| (0..window).map(move |c| (ti + r) * w + tj + c)).collect();
            let mean = |src: &[S]| pix.iter().map(|&p| src[p].as_f64()).sum::<f64>() / n;
            let (ma, mb) = (mean(a), mean(b));
            let ca = pix.iter().map(|&p| (a[p].as_f64() - ma).powi(2)).sum::<f64>().sqrt();
            let cb = pix.iter().map(|&p| (b[p].as_f64() - mb).powi(2)).sum::<f64>().sqrt();
            let c_hat = ca.max(cb);
            let (wa, wb) = (ca.powf(MEF_STRUCTURE_POWER), cb.powf(MEF_STRUCTURE_POWER));
            let mut s: Vec<f64> = pix
                .iter()
                .map(|&p| {
                    let sa = if ca > 0.0 { (a[p].as_f64() - ma) / ca } else { 0.0 };
                    let sb = if cb > 0.0 { (b[p].as_f64() - mb) / cb } else { 0.0 };
                    if wa + wb > 0.0 {
                        (wa * sa + wb * sb) / (wa + wb)
                    } else {
                        0.0
                    }
                })
                .collect();
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                s.iter_mut().for_each(|v| *v /= norm);
            }
            let m = 0.5 * (ma + mb);
            for (k, &p) in pix.iter().enumerate() {
                o[p] = S::lit(c_hat * s[k] + m);
            }
        }
    }
    Ok(out)
}

fn l1_graph<S: Scalar>(g: &mut Graph<S>, x: Var, target: &Tensor<S>) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(x, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `1 - mean tile SSIM` against the desired image, averaged over frames. `fused[F, H, W]`.
pub fn mef_ssim_graph<S: Scalar>(
    g: &mut Graph<S>,
    fused: Var,
    s1: &Tensor<S>,
    s2: &Tensor<S>,
    window: usize,
) -> Result<Var> {
    let desired = mef_desired(s1, s2, window)?;
    let desired = desired.reshape(g.shape(fused))?;
    let per_frame = g.tile_ssim(fused, &desired, window)?;
    let m = g.mean(per_frame);
    let neg = g.scale(m, -S::one());
    Ok(g.add_scalar(neg, S::one()))
}

/// Spatial term on `fused[F, H, W]` against sources of the same shape.
pub fn spatial_graph<S: Scalar>(g: &mut Graph<S>, task: TaskKind, fused: Var, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Var> {
    if g.shape(fused) != s1.shape() {
        return Err(dim_err!("fused {:?} vs sources {:?}", g.shape(fused), s1.shape()));
    }
    let target = reference_target(task, s1, s2)?;
    let l1 = l1_graph(g, fused, &target)?;
    if task == TaskKind::Mef {
        let ssim = mef_ssim_graph(g, fused, s1, s2, MEF_WINDOW)?;
        g.add(l1, ssim)
    } else {
        Ok(l1)
    }
}

/// Elementwise max of source Sobel magnitudes.
pub fn gradient_target<S: Scalar>(s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape(s1, s2)?;
    let (_, h, w) = frames_hw(s1.shape())?;
    let m1 = kernels::sobel_mag_fwd(s1.data(), h, w);
    let m2 = kernels::sobel_mag_fwd(s2.data(), h, w);
    Tensor::new(s1.shape(), m1.iter().zip(&m2).map(|(&a, &b)| a.max(b)).collect())
}

pub fn gradient_graph<S: Scalar>(g: &mut Graph<S>, fused: Var, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Var> {
    if g.shape(fused) != s1.shape() {
        return Err(dim_err!("fused {:?} vs sources {:?}", g.shape(fused), s1.shape()));
    }
    let target = gradient_target(s1, s2)?;
    let mag = g.sobel(fused)?;
    l1_graph(g, mag, &target)
}

fn frame_diff_index(t: usize, hw: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    (Arc::new((hw..t * hw).collect()), Arc::new((0..(t - 1) * hw).collect()))
}

/// First-difference matching of `fused[T, H, W]` against a reference clip.
pub fn temporal_graph<S: Scalar>(g: &mut Graph<S>, fused: Var, reference: &Tensor<S>) -> Result<Var> {
    let s = g.shape(fused).to_vec();
    if s.len() != 3 || reference.shape() != s.as_slice() {
        return Err(dim_err!("temporal loss needs matching [T, H, W] clips, got {:?} and {:?}", s, reference.shape()));
    }
    let (t, hw) = (s[0], s[1] * s[2]);
    if t < 2 {
        return Err(contract_err!("temporal loss needs at least 2 frames, got {}", t));
    }
    let (next, prev) = frame_diff_index(t, hw);
    let shape = [t - 1, s[1], s[2]];
    let a = g.gather(fused, next.clone(), &shape)?;
    let b = g.gather(fused, prev.clone(), &shape)?;
    let df = g.sub(a, b)?;
    let r = reference.data();
    let dr = Tensor::new(&shape, next.iter().zip(prev.iter()).map(|(&i, &j)| r[i] - r[j]).collect())?;
    l1_graph(g, df, &dr)
}

/// Weighted objective on `fused[T, H, W]` with sources of the same shape.
pub fn total_graph<S: Scalar>(
    g: &mut Graph<S>,
    task: TaskKind,
    weights: LossWeights,
    fused: Var,
    s1: &Tensor<S>,
    s2: &Tensor<S>,
) -> Result<LossBreakdown<Var>> {
    let spatial = spatial_graph(g, task, fused, s1, s2)?;
    let grad = gradient_graph(g, fused, s1, s2)?;
    let reference = reference_target(task, s1, s2)?;
    let temp = temporal_graph(g, fused, &reference)?;
    let wg = g.scale(grad, S::lit(weights.alpha1));
    let wt = g.scale(temp, S::lit(weights.alpha2));
    let partial = g.add(spatial, wg)?;
    let total = g.add(partial, wt)?;
    Ok(LossBreakdown { spatial, grad, temp, total })
}

fn eval<S: Scalar>(x: &Tensor<S>, f: impl FnOnce(&mut Graph<S>, Var) -> Result<Var>) -> Result<S> {
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).item())
}

fn as_frames<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (f, h, w) = frames_hw(x.shape())?;
    x.clone().reshape(&[f, h, w])
}

/// Spatial loss of one fused image `[H, W]` (or a stack `[F, H, W]`, averaged).
pub fn spatial_loss<S: Scalar>(task: TaskKind, fused: &Tensor<S>, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<S> {
    same_shape(fused, s1)?;
    same_shape(s1, s2)?;
    let (a, b) = (as_frames(s1)?, as_frames(s2)?);
    eval(&as_frames(fused)?, |g, v| spatial_graph(g, task, v, &a, &b))
}

pub fn mef_ssim_loss<S: Scalar>(fused: &Tensor<S>, s1: &Tensor<S>, s2: &Tensor<S>, window: usize) -> Result<S> {
    same_shape(fused, s1)?;
    let (a, b) = (as_frames(s1)?, as_frames(s2)?);
    eval(&as_frames(fused)?, |g, v| mef_ssim_graph(g, v, &a, &b, window))
}

pub fn gradient_loss<S: Scalar>(fused: &Tensor<S>, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<S> {
    same_shape(fused, s1)?;
    let (a, b) = (as_frames(s1)?, as_frames(s2)?);
    eval(&as_frames(fused)?, |g, v| gradient_graph(g, v, &a, &b))
}

pub fn temporal_loss<S: Scalar>(fused_clip: &Tensor<S>, ref_clip: &Tensor<S>) -> Result<S> {
    eval(fused_clip, |g, v| temporal_graph(g, v, ref_clip))
}

/// Task-weighted objective on `[T, H, W]` clips.
pub fn total_loss<S: Scalar>(
    task: TaskKind,
    fused_clip: &Tensor<S>,
    s1_clip: &Tensor<S>,
    s2_clip: &Tensor<S>,
) -> Result<LossBreakdown<S>> {
    total_loss_weighted(task, LossWeights::for_task(task), fused_clip, s1_clip, s2_clip)
}

pub fn total_loss_weighted<S: Scalar>(
    task: TaskKind,
    weights: LossWeights,
    fused_clip: &Tensor<S>,
    s1_clip: &Tensor<S>,
    s2_clip: &Tensor<S>,
) -> Result<LossBreakdown<S>> {
    same_shape(fused_clip, s1_clip)?;
    same_shape(s1_clip, s2_clip)?;
    let mut g = Graph::no_grad();
    let v = g.constant(fused_clip.clone());
    let b = total_graph(&mut g, task, weights, v, s1_clip, s2_clip)?;
    Ok(LossBreakdown {
        spatial: g.value(b.spatial).item(),
        grad: g.value(b.grad).item(),
        temp: g.value(b.temp).item(),
        total: g.value(b.total).item(),
    })
}
