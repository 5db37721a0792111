//! Tape-based reverse-mode differentiation over whole-tensor primitives.

use std::sync::Arc;

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::parallel;
use crate::scalar::{self, Scalar};
use crate::scan::ScanOrder;
use crate::ssm::kernel::{discretize_bwd, discretize_tokens, scan_direction, scan_direction_bwd, scan_direction_bwd_into, Discrete, DirectionGrads, ScanOperands};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Linear { x: Var, w: Var, b: Option<Var>, m: usize, k: usize, n: usize },
    LayerNorm { x: Var, g: Var, b: Var, c: usize, xhat: Vec<S>, rstd: Vec<S> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    DwConv { x: Var, w: Var, b: Var, dims: [usize; 3], k: [usize; 3], c: usize },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Concat { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    Scan(Box<ScanNode<S>>),
    Sobel { x: Var, h: usize, w: usize },
    TileSsim { x: Var, target: Arc<Vec<S>>, h: usize, w: usize, win: usize },
}

struct ScanNode<S> {
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    orders: Vec<Arc<ScanOrder>>,
    a: Vec<S>,
    disc: Discrete<S>,
    l: usize,
    d: usize,
    n: usize,
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf, or `None` if it does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// Inference graph: parameters never require gradients and nothing is saved for backward.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: S) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, scalar::silu, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, scalar::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// `x[..., K] * w[K, N] + b[N]`; leading axes are flattened into rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(dim_err!("linear: input {:?} incompatible with weight {:?}", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err!("linear: bias {:?} does not match {} outputs", self.shape(b), n));
            }
        }
        let m = self.value(x).numel() / k.max(1);
        let y = kernels::linear_fwd(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), m, k, n);
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = n;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b, m, k, n }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: S) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(g) != [c] || self.shape(b) != [c] {
            return Err(dim_err!("layer_norm: affine params must have shape [{}]", c));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_fwd(self.value(x).data(), self.value(g).data(), self.value(b).data(), c, eps);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, g, b]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(Tensor::new(&shape, y)?, Op::LayerNorm { x, g, b, c, xhat, rstd }, rg))
    }

    /// Channels-last conv: `x[T,H,W,Cin]`, `w[kt,kh,kw,Cin,Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[3] != xs[3] {
            return Err(dim_err!("conv3d: input {:?} incompatible with kernel {:?}", xs, ws));
        }
        let geom = ConvGeom {
            input: [xs[0], xs[1], xs[2]],
            kernel: [ws[0], ws[1], ws[2]],
            stride,
            padding,
            c_in: xs[3],
            c_out: ws[4],
        };
        let out = geom
            .output()
            .ok_or_else(|| dim_err!("conv3d: kernel {:?} larger than padded input {:?}", &ws[..3], &xs[..3]))?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(dim_err!("conv3d: bias shape {:?}", self.shape(b)));
            }
        }
        let y = kernels::conv3d_fwd(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let t = Tensor::new(&[out[0], out[1], out[2], geom.c_out], y)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }, rg))
    }

    /// Depthwise "same" conv on `x[T,H,W,C]` with `w[kt,kh,kw,C]`.
    pub fn dwconv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[3] != xs[3] || ws[..3].iter().any(|k| k % 2 == 0) {
            return Err(dim_err!("dwconv3d: input {:?} incompatible with kernel {:?}", xs, ws));
        }
        let c = xs[3];
        if self.shape(b) != [c] {
            return Err(dim_err!("dwconv3d: bias shape {:?}", self.shape(b)));
        }
        let dims = [xs[0], xs[1], xs[2]];
        let k = [ws[0], ws[1], ws[2]];
        let y = kernels::dwconv3d_fwd(self.value(x).data(), self.value(w).data(), self.value(b).data(), dims, k, c);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&xs, y)?, Op::DwConv { x, w, b, dims, k, c }, rg))
    }

    /// `out.flat[i] = x.flat[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(dim_err!("gather index {} out of range {}", bad, src.len()));
        }
        let data: Vec<S> = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        self.gather(x, Arc::new((0..n).collect()), shape)
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start >= end || end > xs[0] {
            return Err(dim_err!("slice0 [{}, {}) out of range for {:?}", start, end, xs));
        }
        let inner: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = end - start;
        self.gather(x, Arc::new((start * inner..end * inner).collect()), &shape)
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err!("concat: shapes {:?} and {:?} differ off the last axis", sa, sb));
        }
        let ca = *sa.last().expect("rank >= 1");
        let cb = *sb.last().expect("rank >= 1");
        let rows = self.value(a).numel() / ca.max(1);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { a, b, rows, ca, cb }, rg))
    }

    /// Selective scan summed over traversal orders.
    ///
    /// `u, delta: [L, D]`, `a_log: [D, N]` with `A = -exp(a_log)`, `b, c: [L, N]`, `d_skip: [D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        orders: &[Arc<ScanOrder>],
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 2 {
            return Err(dim_err!("scan: u must be [L, D], got {:?}", us));
        }
        let (l, d) = (us[0], us[1]);
        let n = self.shape(a_log).get(1).copied().unwrap_or(0);
        if self.shape(delta) != [l, d]
            || self.shape(a_log) != [d, n]
            || self.shape(b) != [l, n]
            || self.shape(c) != [l, n]
            || self.shape(d_skip) != [d]
        {
            return Err(dim_err!("scan: inconsistent operand shapes for L={} D={} N={}", l, d, n));
        }
        if orders.is_empty() || orders.iter().any(|o| o.len() != l || o.segment == 0) {
            return Err(dim_err!("scan: every order must cover {} positions", l));
        }
        let a: Vec<S> = self.value(a_log).data().iter().map(|&v| -v.exp()).collect();
        let ops = ScanOperands {
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: &a,
            b: self.value(b).data(),
            c: self.value(c).data(),
            d_skip: self.value(d_skip).data(),
            l,
            d,
            n,
        };
        if let Some(bad) = ops.delta.iter().find(|v| !(**v > S::zero())) {
            return Err(contract_err!("scan: step sizes must be positive, found {}", bad));
        }
        let disc = discretize_tokens(&ops);
        let cv = ops.c;
        let per_dir: Vec<Vec<S>> = parallel::map_ordered(orders, |o| {
            let mut y = vec![S::zero(); l * d];
            scan_direction(&disc, cv, o, d, n, &mut y);
            y
        });
        let dirs = S::lit(orders.len() as f64);
        let mut y: Vec<S> = ops.u.iter().enumerate().map(|(i, &uv)| dirs * ops.d_skip[i % d] * uv).collect();
        for part in &per_dir {
            for (acc, &v) in y.iter_mut().zip(part) {
                *acc += v;
            }
        }
        let rg = self.rg(&[u, delta, a_log, b, c, d_skip]);
        let node = ScanNode { u, delta, a_log, b, c, d_skip, orders: orders.to_vec(), a, disc, l, d, n };
        Ok(self.push(Tensor::new(&[l, d], y)?, Op::Scan(Box::new(node)), rg))
    }

    /// Sobel gradient magnitude of `x[..., H, W]`, replicate borders.
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[xs.len() - 2] < 3 || xs[xs.len() - 1] < 3 {
            return Err(dim_err!("sobel needs H, W >= 3, got {:?}", xs));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let y = kernels::sobel_mag_fwd(self.value(x).data(), h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&xs, y)?, Op::Sobel { x, h, w }, rg))
    }

    /// Per-frame mean tile SSIM of `x[F, H, W]` against a fixed target. Output `[F]`.
    pub fn tile_ssim(&mut self, x: Var, target: &Tensor<S>, win: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || target.shape() != xs.as_slice() {
            return Err(dim_err!("tile_ssim: input {:?} vs target {:?}", xs, target.shape()));
        }
        let (f, h, w) = (xs[0], xs[1], xs[2]);
        if win == 0 || win > h || win > w {
            return Err(dim_err!("tile_ssim window {} does not fit {}x{}", win, h, w));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(f);
        for fi in 0..f {
            let xf = &self.value(x).data()[fi * hw..(fi + 1) * hw];
            let tf = &target.data()[fi * hw..(fi + 1) * hw];
            out.push(kernels::tile_ssim(xf, tf, h, w, win, false).0);
        }
        let rg = self.rg(&[x]);
        let target = Arc::new(target.data().to_vec());
        Ok(self.push(Tensor::new(&[f], out)?, Op::TileSsim { x, target, h, w, win }, rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<S>> {
        if self.value(out).numel() != 1 {
            return Err(contract_err!("backward seed must be a scalar, got shape {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![S::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape(), g).expect("grad shape matches value")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let ew = |x: &[S], f: &dyn Fn(S, S) -> S| -> Vec<S> { g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, ew(val(*b), &|g, y| g * y));
                acc(*b, ew(val(*a), &|g, x| g * x));
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Abs(x) => acc(*x, ew(val(*x), &|g, x| if x > S::zero() { g } else if x < S::zero() { -g } else { S::zero() })),
            Op::Relu(x) => acc(*x, ew(val(*x), &|g, x| if x > S::zero() { g } else { S::zero() })),
            Op::Silu(x) => acc(
                *x,
                ew(val(*x), &|g, x| {
                    let s = scalar::sigmoid(x);
                    g * s * (S::one() + x * (S::one() - s))
                }),
            ),
            Op::Softplus(x) => acc(*x, ew(val(*x), &|g, x| g * scalar::sigmoid(x))),
            Op::Exp(x) => acc(*x, ew(node.value.data(), &|g, y| g * y)),
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(*x, vec![g[0] / S::lit(n.max(1) as f64); n]);
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (gx, gw, gb) = kernels::linear_bwd(g, val(*x), val(*w), *m, *k, *n);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::LayerNorm { x, g: gamma, b, c, xhat, rstd } => {
                let (gx, gg, gb) = kernels::layer_norm_bwd(g, xhat, rstd, val(*gamma), *c);
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*b, gb);
            }
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv3d_bwd(g, val(*x), val(*w), geom);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::DwConv { x, w, b, dims, k, c } => {
                let (gx, gw, gb) = kernels::dwconv3d_bwd(g, val(*x), val(*w), *dims, *k, *c);
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for (&i, &gv) in index.iter().zip(g) {
                    gx[i] += gv;
                }
                acc(*x, gx);
            }
            Op::Concat { a, b, rows, ca, cb } => {
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..*rows {
                    let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..*ca]);
                    gb.extend_from_slice(&row[*ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scan(sn) => {
                let ops = ScanOperands {
                    u: val(sn.u),
                    delta: val(sn.delta),
                    a: &sn.a,
                    b: val(sn.b),
                    c: val(sn.c),
                    d_skip: val(sn.d_skip),
                    l: sn.l,
                    d: sn.d,
                    n: sn.n,
                };
                let ldn = sn.l * sn.d * sn.n;
                let mut sum = DirectionGrads { g_a_bar: vec![S::zero(); ldn], g_bu: vec![S::zero(); ldn], gc: vec![S::zero(); sn.l * sn.n] };
                if parallel::is_parallel() {
                    let parts: Vec<DirectionGrads<S>> =
                        parallel::map_ordered(&sn.orders, |o| scan_direction_bwd(&sn.disc, ops.c, o, g, sn.d, sn.n));
                    for p in parts {
                        sum.g_a_bar.iter_mut().zip(p.g_a_bar).for_each(|(d, s)| *d += s);
                        sum.g_bu.iter_mut().zip(p.g_bu).for_each(|(d, s)| *d += s);
                        sum.gc.iter_mut().zip(p.gc).for_each(|(d, s)| *d += s);
                    }
                } else {
                    let mut hs = Vec::new();
                    for o in &sn.orders {
                        scan_direction_bwd_into(&sn.disc, ops.c, o, g, sn.d, sn.n, &mut hs, &mut sum);
                    }
                }
                let DirectionGrads { g_a_bar, g_bu, gc } = sum;
                let tg = discretize_bwd(&ops, &sn.disc, &g_a_bar, &g_bu, g, sn.orders.len());
                // A = -exp(a_log), so dA/da_log = A
                let g_alog: Vec<S> = tg.ga.iter().zip(&sn.a).map(|(&g, &a)| g * a).collect();
                acc(sn.u, tg.gu);
                acc(sn.delta, tg.gdelta);
                acc(sn.a_log, g_alog);
                acc(sn.b, tg.gb);
                acc(sn.c, gc);
                acc(sn.d_skip, tg.gd);
            }
            Op::Sobel { x, h, w } => {
                acc(*x, kernels::sobel_mag_bwd(g, val(*x), node.value.data(), *h, *w));
            }
            Op::TileSsim { x, target, h, w, win } => {
                let hw = h * w;
                let xv = val(*x);
                let mut gx = vec![S::zero(); xv.len()];
                for (fi, &gf) in g.iter().enumerate() {
                    let (_, gr) =
                        kernels::tile_ssim(&xv[fi * hw..(fi + 1) * hw], &target[fi * hw..(fi + 1) * hw], *h, *w, *win, true);
                    for (o, v) in gx[fi * hw..(fi + 1) * hw].iter_mut().zip(gr) {
                        *o = gf * v;
                    }
                }
                acc(*x, gx);
            }
        }
    }
}
