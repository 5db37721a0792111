//! Dual-stream fusion network: tubelet embedding, VSS encoder stacks,
//! channel concatenation, and a spatial-scan decoder reconstructing the
//! window's center frame.
//!
//! Features travel through the graph channels-last (`[T, H, W, C]`, or
//! `[L, C]` as a token matrix). The plain-tensor entry points take and return
//! channel-first layouts.

pub mod checkpoint;
pub mod config;

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, ResMode, ScanMode, MODEL_KEYS};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;
use crate::scan::{scan_order, ScanPath};
use crate::ssm::{ssm_layer_graph, uniform, SsmParams, SsmVars};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, pos: 0 }
    }

    fn next(&mut self) -> Result<Var> {
        let v = self.vars.get(self.pos).copied().ok_or_else(|| Error::Internal("parameter list exhausted".into()))?;
        self.pos += 1;
        Ok(v)
    }

    fn take(&mut self, n: usize) -> Result<&'a [Var]> {
        if self.pos + n > self.vars.len() {
            return Err(Error::Internal("parameter list exhausted".into()));
        }
        let s = &self.vars[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn bind_all<S: Scalar>(g: &mut Graph<S>, named: Vec<(String, &Tensor<S>)>) -> Vec<Var> {
    named.into_iter().map(|(_, t)| g.param(t.clone())).collect()
}

fn prefixed<'a, S: Scalar>(prefix: &str, items: Vec<(String, &'a Tensor<S>)>) -> Vec<(String, &'a Tensor<S>)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Residual selective-scan block: `x + out(scan(silu(dwconv(in_x(LN x)))) * silu(in_z(LN x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VssBlock<S: Scalar> {
    pub mode: ScanMode,
    pub norm_g: Tensor<S>,
    pub norm_b: Tensor<S>,
    /// `[dim, d_inner]`
    pub w_x: Tensor<S>,
    /// `[dim, d_inner]`, gate branch
    pub w_z: Tensor<S>,
    /// `[kt, kh, kw, d_inner]`
    pub conv_w: Tensor<S>,
    pub conv_b: Tensor<S>,
    pub ssm: SsmParams<S>,
    /// `[d_inner, dim]`, zero at init
    pub w_out: Tensor<S>,
}

pub const VSS_TENSORS: usize = 14;

impl<S: Scalar> VssBlock<S> {
    pub fn init<R: Rng>(dim: usize, d_inner: usize, state_dim: usize, mode: ScanMode, rng: &mut R) -> Self {
        let k = mode.conv_kernel();
        let taps = k[0] * k[1] * k[2];
        let bound = 1.0 / (dim as f64).sqrt();
        VssBlock {
            mode,
            norm_g: Tensor::full(&[dim], S::one()),
            norm_b: Tensor::zeros(&[dim]),
            w_x: uniform(rng, &[dim, d_inner], bound),
            w_z: uniform(rng, &[dim, d_inner], bound),
            conv_w: uniform(rng, &[k[0], k[1], k[2], d_inner], 1.0 / (taps as f64).sqrt()),
            conv_b: Tensor::zeros(&[d_inner]),
            ssm: SsmParams::init(d_inner, state_dim, rng),
            w_out: Tensor::zeros(&[d_inner, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm_g.numel()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = vec![
            ("norm.g".to_string(), &self.norm_g),
            ("norm.b".to_string(), &self.norm_b),
            ("in_x.w".to_string(), &self.w_x),
            ("in_z.w".to_string(), &self.w_z),
            ("conv.w".to_string(), &self.conv_w),
            ("conv.b".to_string(), &self.conv_b),
        ];
        v.extend(self.ssm.named().into_iter().map(|(n, t)| (format!("ssm.{n}"), t)));
        v.push(("out.w".to_string(), &self.w_out));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let s = &mut self.ssm;
        vec![
            &mut self.norm_g,
            &mut self.norm_b,
            &mut self.w_x,
            &mut self.w_z,
            &mut self.conv_w,
            &mut self.conv_b,
            &mut s.a_log,
            &mut s.d_skip,
            &mut s.w_b,
            &mut s.w_c,
            &mut s.w_dt,
            &mut s.dt_proj,
            &mut s.dt_bias,
            &mut self.w_out,
        ]
    }

    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        bind_all(g, self.named())
    }

    /// Applies the block to tokens `x[L, dim]` laid out over the cube `dims`.
    /// `vars` are this block's bound tensors in [`VssBlock::named`] order.
    pub fn graph(&self, g: &mut Graph<S>, vars: &[Var], x: Var, dims: (usize, usize, usize)) -> Result<Var> {
        let mut cur = Cursor::new(vars);
        self.apply(g, &mut cur, x, dims)
    }

    fn apply(&self, g: &mut Graph<S>, cur: &mut Cursor<'_>, x: Var, dims: (usize, usize, usize)) -> Result<Var> {
        let (t, h, w) = dims;
        let l = t * h * w;
        if g.shape(x) != [l, self.dim()] {
            return Err(dim_err!("vss block expects [{}, {}] tokens, got {:?}", l, self.dim(), g.shape(x)));
        }
        let di = self.w_x.shape()[1];
        let (ng, nb, wx, wz, cw, cb) = (cur.next()?, cur.next()?, cur.next()?, cur.next()?, cur.next()?, cur.next()?);
        let s = cur.take(7)?;
        let sv = SsmVars { a_log: s[0], d_skip: s[1], w_b: s[2], w_c: s[3], w_dt: s[4], dt_proj: s[5], dt_bias: s[6] };
        let wo = cur.next()?;

        let xn = g.layer_norm(x, ng, nb, S::lit(LN_EPS))?;
        let xi = g.linear(xn, wx, None)?;
        let z = g.linear(xn, wz, None)?;
        let xi = g.reshape(xi, &[t, h, w, di])?;
        let xc = g.dwconv3d(xi, cw, cb)?;
        let xc = g.reshape(xc, &[l, di])?;
        let xa = g.silu(xc);
        let orders = self
            .mode
            .kinds()
            .iter()
            .map(|&k| scan_order(&ScanPath::new(k, t, h, w)))
            .collect::<Result<Vec<_>>>()?;
        let y = ssm_layer_graph(g, xa, &sv, &orders)?;
        let gate = g.silu(z);
        let yg = g.mul(y, gate)?;
        let out = g.linear(yg, wo, None)?;
        g.add(x, out)
    }
}

/// `x + conv2(relu(conv1(x)))` with 3x3 (2D) or 3x3x3 (3D) kernels; `conv2` starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> ResBlock<S> {
    pub fn init<R: Rng>(c: usize, kt: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((kt * 9 * c) as f64).sqrt();
        ResBlock {
            w1: uniform(rng, &[kt, 3, 3, c, c], bound),
            b1: Tensor::zeros(&[c]),
            w2: Tensor::zeros(&[kt, 3, 3, c, c]),
            b2: Tensor::zeros(&[c]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("conv1.w".to_string(), &self.w1),
            ("conv1.b".to_string(), &self.b1),
            ("conv2.w".to_string(), &self.w2),
            ("conv2.b".to_string(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn apply(&self, g: &mut Graph<S>, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (cur.next()?, cur.next()?, cur.next()?, cur.next()?);
        let pad = [self.w1.shape()[0] / 2, 1, 1];
        let h = g.conv3d(x, w1, Some(b1), [1; 3], pad)?;
        let h = g.relu(h);
        let h = g.conv3d(h, w2, Some(b2), [1; 3], pad)?;
        g.add(x, h)
    }
}

/// One input stream: tubelet embedding followed by `depth` VSS blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S: Scalar> {
    /// `[tt, th, tw, in_channels, embed_dim]`
    pub embed_w: Tensor<S>,
    pub embed_b: Tensor<S>,
    pub blocks: Vec<VssBlock<S>>,
}

impl<S: Scalar> Encoder<S> {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let [tt, th, tw] = cfg.tubelet;
        let fan_in = tt * th * tw * cfg.in_channels;
        Encoder {
            embed_w: uniform(rng, &[tt, th, tw, cfg.in_channels, cfg.embed_dim], 1.0 / (fan_in as f64).sqrt()),
            embed_b: Tensor::zeros(&[cfg.embed_dim]),
            blocks: (0..cfg.depth)
                .map(|_| VssBlock::init(cfg.embed_dim, cfg.d_inner(), cfg.state_dim, cfg.scan_mode, rng))
                .collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = vec![("embed.w".to_string(), &self.embed_w), ("embed.b".to_string(), &self.embed_b)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.named()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.embed_w, &mut self.embed_b];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v
    }

    fn embed(&self, g: &mut Graph<S>, cur: &mut Cursor<'_>, video: Var) -> Result<(Var, (usize, usize, usize))> {
        let (w, b) = (cur.next()?, cur.next()?);
        let stride = [self.embed_w.shape()[0], self.embed_w.shape()[1], self.embed_w.shape()[2]];
        let y = g.conv3d(video, w, Some(b), stride, [0; 3])?;
        let s = g.shape(y).to_vec();
        let dims = (s[0], s[1], s[2]);
        let tokens = g.reshape(y, &[s[0] * s[1] * s[2], s[3]])?;
        Ok((tokens, dims))
    }

    /// `video[Tp, Hp, Wp, C]` (already padded to tubelet multiples) to tokens `[L, E]`.
    fn apply(&self, g: &mut Graph<S>, cur: &mut Cursor<'_>, video: Var) -> Result<(Var, (usize, usize, usize))> {
        let (mut x, dims) = self.embed(g, cur, video)?;
        for b in &self.blocks {
            x = b.apply(g, cur, x, dims)?;
        }
        Ok((x, dims))
    }
}

/// Spatial-scan blocks, residual blocks, pixel-shuffle upsampling and output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<S: Scalar> {
    pub blocks: Vec<VssBlock<S>>,
    pub res: Vec<ResBlock<S>>,
    /// `[1, 3, 3, fused_dim / upsample, out_channels]`
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

impl<S: Scalar> Decoder<S> {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = 2 * cfg.embed_dim;
        let shuffled = c / (cfg.tubelet[1] * cfg.tubelet[2]);
        let kt = match cfg.decoder_resblocks {
            ResMode::Res2d => 1,
            ResMode::Res3d => 3,
        };
        Decoder {
            blocks: (0..cfg.depth)
                .map(|_| VssBlock::init(c, c * cfg.expand, cfg.state_dim, ScanMode::Spatial4, rng))
                .collect(),
            res: (0..cfg.res_blocks).map(|_| ResBlock::init(c, kt, rng)).collect(),
            head_w: uniform(rng, &[1, 3, 3, shuffled, cfg.out_channels], 1.0 / ((9 * shuffled) as f64).sqrt()),
            head_b: Tensor::zeros(&[cfg.out_channels]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.named()));
        }
        for (i, r) in self.res.iter().enumerate() {
            v.extend(prefixed(&format!("res.{i}"), r.named()));
        }
        v.push(("head.w".to_string(), &self.head_w));
        v.push(("head.b".to_string(), &self.head_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        for r in &mut self.res {
            v.extend(r.tensors_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    /// Fused tokens `[L, 2E]` over `dims` to the center frame `[out, out_hw.0, out_hw.1]`.
    fn apply(
        &self,
        g: &mut Graph<S>,
        cur: &mut Cursor<'_>,
        cfg: &ModelConfig,
        fused: Var,
        dims: (usize, usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (t, h, w) = dims;
        if t % 2 == 0 {
            return Err(contract_err!("decoder needs an odd number of token frames, got {}", t));
        }
        let c = g.shape(fused)[1];
        let hw = h * w;
        let center = t / 2;
        // per-frame blocks cannot mix frames, so in 2D mode only the center slice is decoded
        let (mut x, dec_dims) = match cfg.decoder_resblocks {
            ResMode::Res2d => (g.slice0(fused, center * hw, (center + 1) * hw)?, (1, h, w)),
            ResMode::Res3d => (fused, dims),
        };
        for b in &self.blocks {
            x = b.apply(g, cur, x, dec_dims)?;
        }
        let mut v = g.reshape(x, &[dec_dims.0, h, w, c])?;
        for r in &self.res {
            v = r.apply(g, cur, v)?;
        }
        if cfg.decoder_resblocks == ResMode::Res3d {
            v = g.slice0(v, center, center + 1)?;
        }
        let (rh, rw) = (cfg.tubelet[1], cfg.tubelet[2]);
        let cs = c / (rh * rw);
        let v = g.gather(v, pixel_shuffle_index(h, w, c, rh, rw), &[1, h * rh, w * rw, cs])?;
        let (hw_, hb) = (cur.next()?, cur.next()?);
        let y = g.conv3d(v, hw_, Some(hb), [1; 3], [0, 1, 1])?;
        let oc = g.shape(y)[3];
        let (oh, ow) = out_hw;
        g.gather(y, crop_to_channel_first(h * rh, w * rw, oc, oh, ow), &[oc, oh, ow])
    }
}

/// Channels-last `[h, w, c*rh*rw]` to `[h*rh, w*rw, c]`; channel `k*rh*rw + i*rw + j` lands at offset `(i, j)`.
fn pixel_shuffle_index(h: usize, w: usize, c: usize, rh: usize, rw: usize) -> Arc<Vec<usize>> {
    let cs = c / (rh * rw);
    let (oh, ow) = (h * rh, w * rw);
    let mut idx = Vec::with_capacity(oh * ow * cs);
    for y in 0..oh {
        for x in 0..ow {
            for k in 0..cs {
                let src_c = k * rh * rw + (y % rh) * rw + (x % rw);
                idx.push(((y / rh) * w + x / rw) * c + src_c);
            }
        }
    }
    Arc::new(idx)
}

/// `[H, W, C]` (channels-last, possibly padded) to the top-left `[C, oh, ow]`.
fn crop_to_channel_first(h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Arc<Vec<usize>> {
    debug_assert!(oh <= h && ow <= w);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                idx.push((y * w + x) * c + k);
            }
        }
    }
    Arc::new(idx)
}

/// Replicate-pads `video[T, C, H, W]` up to tubelet multiples and moves channels last.
pub fn prepare_video<S: Scalar>(video: &Tensor<S>, tubelet: [usize; 3]) -> Result<Tensor<S>> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(dim_err!("expected a [T, C, H, W] clip, got {:?}", s));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(dim_err!("empty video {:?}", s));
    }
    let up = |n: usize, k: usize| n.div_ceil(k) * k;
    let (tp, hp, wp) = (up(t, tubelet[0]), up(h, tubelet[1]), up(w, tubelet[2]));
    let d = video.data();
    let mut out = Vec::with_capacity(tp * hp * wp * c);
    for ti in 0..tp {
        let ts = ti.min(t - 1);
        for y in 0..hp {
            let ys = y.min(h - 1);
            for x in 0..wp {
                let xs = x.min(w - 1);
                for ch in 0..c {
                    out.push(d[((ts * c + ch) * h + ys) * w + xs]);
                }
            }
        }
    }
    Tensor::new(&[tp, hp, wp, c], out)
}

/// Full fusion network with two independent encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub encoders: [Encoder<S>; 2],
    pub decoder: Decoder<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e1 = Encoder::init(&cfg, &mut rng);
        let e2 = Encoder::init(&cfg, &mut rng);
        let decoder = Decoder::init(&cfg, &mut rng);
        Ok(Model { cfg, encoders: [e1, e2], decoder })
    }

    /// Every trainable tensor with a stable dotted name, in binding order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = prefixed("enc1", self.encoders[0].named());
        v.extend(prefixed("enc2", self.encoders[1].named()));
        v.extend(prefixed("dec", self.decoder.named()));
        v
    }

    /// Mutable views in the same order as [`Model::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let [e1, e2] = &mut self.encoders;
        let mut v = e1.tensors_mut();
        v.extend(e2.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        bind_all(g, self.named())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut out = Model::<T>::new(self.cfg.clone(), 0).expect("config already validated");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }

    fn check_window(&self, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<()> {
        if s1.shape() != s2.shape() {
            return Err(dim_err!("source shapes differ: {:?} vs {:?}", s1.shape(), s2.shape()));
        }
        let s = s1.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(dim_err!("expected [T, {}, H, W] windows, got {:?}", self.cfg.in_channels, s));
        }
        if s[0] != self.cfg.window {
            return Err(contract_err!("window has {} frames, model expects {}", s[0], self.cfg.window));
        }
        Ok(())
    }

    /// Center-frame reconstruction on the graph: windows `[T, C, H, W]` to `[out, H, W]`.
    /// `vars` come from [`Model::bind`].
    pub fn forward_graph(&self, g: &mut Graph<S>, vars: &[Var], s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Var> {
        self.check_window(s1, s2)?;
        let (h, w) = (s1.shape()[2], s1.shape()[3]);
        let v1 = g.constant(prepare_video(s1, self.cfg.tubelet)?);
        let v2 = g.constant(prepare_video(s2, self.cfg.tubelet)?);
        let mut cur = Cursor::new(vars);
        let (f1, dims) = self.encoders[0].apply(g, &mut cur, v1)?;
        let (f2, _) = self.encoders[1].apply(g, &mut cur, v2)?;
        let fused = g.concat_last(f1, f2)?;
        self.decoder.apply(g, &mut cur, &self.cfg, fused, dims, (h, w))
    }

    fn stream(&self, stream: usize) -> Result<&Encoder<S>> {
        self.encoders.get(stream).ok_or_else(|| contract_err!("stream index {} out of range (0 or 1)", stream))
    }

    fn per_item(video: &Tensor<S>, mut f: impl FnMut(&Tensor<S>) -> Result<Tensor<S>>) -> Result<Tensor<S>> {
        if video.ndim() != 5 {
            return Err(dim_err!("expected [B, T, C, H, W], got {:?}", video.shape()));
        }
        let items = (0..video.shape()[0]).map(|b| f(&video.index0(b)?)).collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(dim_err!("empty batch"));
        }
        Tensor::stack(&items)
    }

    fn run_encoder(&self, stream: usize, clip: &Tensor<S>, blocks: bool) -> Result<Tensor<S>> {
        let enc = self.stream(stream)?;
        if clip.shape()[1] != self.cfg.in_channels {
            return Err(dim_err!("expected {} input channels, got {:?}", self.cfg.in_channels, clip.shape()));
        }
        let mut g = Graph::no_grad();
        let vars = bind_all(&mut g, enc.named());
        let v = g.constant(prepare_video(clip, self.cfg.tubelet)?);
        let mut cur = Cursor::new(&vars);
        let (x, (t, h, w)) = if blocks { enc.apply(&mut g, &mut cur, v)? } else { enc.embed(&mut g, &mut cur, v)? };
        let e = g.shape(x)[1];
        g.value(x).clone().reshape(&[t, h, w, e])?.permute(&[3, 0, 1, 2])
    }

    /// `video[B, T, C, H, W]` to tokens `[B, E, T', H', W']` for stream 0 or 1.
    pub fn tubelet_embed(&self, stream: usize, video: &Tensor<S>) -> Result<Tensor<S>> {
        Self::per_item(video, |clip| self.run_encoder(stream, clip, false))
    }

    /// Embedding followed by the stream's VSS stack.
    pub fn encode_stream(&self, stream: usize, video: &Tensor<S>) -> Result<Tensor<S>> {
        Self::per_item(video, |clip| self.run_encoder(stream, clip, true))
    }

    /// `[B, 2E, T', H', W']` features to center frames `[B, out, H'*th, W'*tw]`.
    pub fn decode(&self, fused: &Tensor<S>) -> Result<Tensor<S>> {
        let s = fused.shape();
        if s.len() != 5 || s[1] != 2 * self.cfg.embed_dim {
            return Err(dim_err!("expected [B, {}, T, H, W] features, got {:?}", 2 * self.cfg.embed_dim, s));
        }
        if s[2] % 2 == 0 {
            return Err(contract_err!("decode needs an odd number of frames, got {}", s[2]));
        }
        let out_hw = (s[3] * self.cfg.tubelet[1], s[4] * self.cfg.tubelet[2]);
        let items = (0..s[0])
            .map(|b| {
                let item = fused.index0(b)?;
                let (c, t, h, w) = (s[1], s[2], s[3], s[4]);
                let tokens = item.permute(&[1, 2, 3, 0])?.reshape(&[t * h * w, c])?;
                let mut g = Graph::no_grad();
                let vars = bind_all(&mut g, self.decoder.named());
                let x = g.constant(tokens);
                let mut cur = Cursor::new(&vars);
                let y = self.decoder.apply(&mut g, &mut cur, &self.cfg, x, (t, h, w), out_hw)?;
                Ok(g.value(y).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    /// Fused center frame for each batch item: `[B, T, C, H, W]` x2 to `[B, out, H, W]`.
    pub fn forward(&self, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Tensor<S>> {
        if s1.shape() != s2.shape() || s1.ndim() != 5 {
            return Err(dim_err!("sources must share a [B, T, C, H, W] shape: {:?} vs {:?}", s1.shape(), s2.shape()));
        }
        let items = (0..s1.shape()[0])
            .map(|b| self.forward_window(&s1.index0(b)?, &s2.index0(b)?))
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(dim_err!("empty batch"));
        }
        Tensor::stack(&items)
    }

    /// One window `[T, C, H, W]` per source to `[out, H, W]`.
    pub fn forward_window(&self, s1: &Tensor<S>, s2: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let vars = self.bind(&mut g);
        let y = self.forward_graph(&mut g, &vars, s1, s2)?;
        Ok(g.value(y).clone())
    }

    /// Sliding-window inference: `[B, T, C, H, W]` x2 to `[B, T, out, H, W]`.
    pub fn fuse_video(&self, v1: &Tensor<S>, v2: &Tensor<S>) -> Result<Tensor<S>> {
        if v1.ndim() != 5 || v2.ndim() != 5 {
            return Err(dim_err!("expected [B, T, C, H, W] videos, got {:?} and {:?}", v1.shape(), v2.shape()));
        }
        if v1.shape() != v2.shape() {
            return Err(contract_err!("source videos differ in shape: {:?} vs {:?}", v1.shape(), v2.shape()));
        }
        let items = (0..v1.shape()[0])
            .map(|b| self.fuse_clip(&v1.index0(b)?, &v2.index0(b)?))
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(dim_err!("empty batch"));
        }
        Tensor::stack(&items)
    }

    /// Sliding-window inference on one clip pair `[T, C, H, W]`, giving `[T, out, H, W]`.
    pub fn fuse_clip(&self, v1: &Tensor<S>, v2: &Tensor<S>) -> Result<Tensor<S>> {
        if v1.shape() != v2.shape() || v1.ndim() != 4 {
            return Err(contract_err!("source clips differ in shape: {:?} vs {:?}", v1.shape(), v2.shape()));
        }
        let t = v1.shape()[0];
        if t == 0 {
            return Err(dim_err!("empty clip"));
        }
        let frames = (0..t)
            .map(|c| {
                let idx = window_indices(c, t, self.cfg.window);
                let w1 = Tensor::stack(&idx.iter().map(|&i| v1.index0(i)).collect::<Result<Vec<_>>>()?)?;
                let w2 = Tensor::stack(&idx.iter().map(|&i| v2.index0(i)).collect::<Result<Vec<_>>>()?)?;
                self.forward_window(&w1, &w2)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&frames)
    }
}

/// Frame indices of the window centered at `center`, clamped at the clip ends.
pub fn window_indices(center: usize, len: usize, window: usize) -> Vec<usize> {
    let half = (window / 2) as isize;
    (0..window as isize).map(|j| (center as isize + j - half).clamp(0, len as isize - 1) as usize).collect()
}

/// Applies one VSS block to a channel-first cube `x[C, T, H, W]`.
pub fn vss_block_forward<S: Scalar>(x: &Tensor<S>, block: &VssBlock<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || s[0] != block.dim() {
        return Err(dim_err!("expected [{}, T, H, W], got {:?}", block.dim(), s));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let tokens = x.permute(&[1, 2, 3, 0])?.reshape(&[t * h * w, c])?;
    let mut g = Graph::no_grad();
    let vars = block.bind(&mut g);
    let xv = g.constant(tokens);
    let y = block.graph(&mut g, &vars, xv, (t, h, w))?;
    g.value(y).clone().reshape(&[t, h, w, c])?.permute(&[3, 0, 1, 2])
}

/// Channel concatenation of `[B, E, T, H, W]` features, first stream first.
pub fn fuse_features<S: Scalar>(f1: &Tensor<S>, f2: &Tensor<S>) -> Result<Tensor<S>> {
    if f1.shape() != f2.shape() || f1.ndim() != 5 {
        return Err(dim_err!("feature shapes differ: {:?} vs {:?}", f1.shape(), f2.shape()));
    }
    let s = f1.shape();
    let per = s[1] * s[2] * s[3] * s[4];
    let mut data = Vec::with_capacity(2 * f1.numel());
    for b in 0..s[0] {
        data.extend_from_slice(&f1.data()[b * per..(b + 1) * per]);
        data.extend_from_slice(&f2.data()[b * per..(b + 1) * per]);
    }
    Tensor::new(&[s[0], 2 * s[1], s[2], s[3], s[4]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_clamps() {
        assert_eq!(window_indices(0, 3, 5), vec![0, 0, 0, 1, 2]);
        assert_eq!(window_indices(2, 3, 5), vec![0, 1, 2, 2, 2]);
        assert_eq!(window_indices(0, 1, 5), vec![0; 5]);
    }

    #[test]
    fn pixel_shuffle_layout() {
        // one token with channels 0..4 becomes a 2x2 patch in reading order
        let idx = pixel_shuffle_index(1, 1, 4, 2, 2);
        assert_eq!(*idx, vec![0, 1, 2, 3]);
        let idx = pixel_shuffle_index(1, 2, 4, 2, 2);
        assert_eq!(*idx, vec![0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn prepare_replicates_edges() {
        let v = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let p = prepare_video(&v, [1, 2, 2]).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4, 1]);
        assert_eq!(p.at(&[0, 3, 3, 0]), 8.0);
        assert_eq!(p.at(&[0, 0, 3, 0]), 2.0);
    }

    #[test]
    fn names_and_mut_views_align() {
        let mut m = Model::<f32>::new(ModelConfig { depth: 1, res_blocks: 1, ..ModelConfig::default() }, 1).unwrap();
        let shapes: Vec<Vec<usize>> = m.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let names: Vec<String> = m.named().iter().map(|(n, _)| n.clone()).collect();
        let mut_shapes: Vec<Vec<usize>> = m.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(m.encoders[0].blocks[0].named().len(), VSS_TENSORS);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
