//! Finite-difference checks of every graph primitive and of the composite
//! layers, shared by the `gradcheck` subcommand and the test suites.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::losses::{total_graph, LossWeights, TaskKind};
use crate::model::{ScanMode, VssBlock};
use crate::numerics::{grad_check, grad_check_sampled, Graph, Var};
use crate::scan::{scan_order, ScanKind, ScanPath};
use crate::ssm::{ssm_layer_graph, SsmParams, SsmVars};
use crate::tensor::Tensor;

/// Pass threshold on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-6;
/// Step for multi-layer checks, where round-off dominates at smaller steps.
pub const COMPOSITE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Primitives,
    Ssm,
    Vss,
    Losses,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["primitives", "ssm", "vss", "losses", "all"];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Primitives => "primitives",
            Suite::Ssm => "ssm",
            Suite::Vss => "vss",
            Suite::Losses => "losses",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "primitives" => Ok(Suite::Primitives),
            "ssm" => Ok(Suite::Ssm),
            "vss" => Ok(Suite::Vss),
            "losses" => Ok(Suite::Losses),
            "all" => Ok(Suite::All),
            _ => Err(contract_err!("unknown gradcheck module '{}', expected one of {:?}", s, Suite::NAMES)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with `|v|` in `[0.2, 1]`, away from the kinks of `abs` and `relu`.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` against fixed random weights so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_t(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, f: F, params: &[Tensor<f64>]) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = grad_check(f, params, FD_EPS)?;
    Ok(CheckResult { name: name.to_string(), max_rel_err: r.max_rel_err, coords: r.coords_checked })
}

fn unary(name: &str, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Var, seed: u64) -> Result<CheckResult> {
    check(name, move |g, v| { let y = op(g, v[0]); project(g, y, seed) }, &[x])
}

pub fn primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (a, b) = (rand_t(&mut rng, &[3, 4], -1.0, 1.0), rand_t(&mut rng, &[3, 4], -1.0, 1.0));
    out.push(check("add", |g, v| { let y = g.add(v[0], v[1])?; project(g, y, 1) }, &[a.clone(), b.clone()])?);
    out.push(check("sub", |g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 2) }, &[a.clone(), b.clone()])?);
    out.push(check("mul", |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 3) }, &[a.clone(), b.clone()])?);
    out.push(unary("scale", a.clone(), |g, x| g.scale(x, -1.75), 4)?);
    out.push(unary("add_scalar", a.clone(), |g, x| g.add_scalar(x, 0.3), 5)?);
    out.push(unary("abs", off_zero(&mut rng, &[3, 4]), |g, x| g.abs(x), 6)?);
    out.push(unary("relu", off_zero(&mut rng, &[3, 4]), |g, x| g.relu(x), 7)?);
    out.push(unary("silu", rand_t(&mut rng, &[3, 4], -3.0, 3.0), |g, x| g.silu(x), 8)?);
    out.push(unary("softplus", rand_t(&mut rng, &[3, 4], -3.0, 3.0), |g, x| g.softplus(x), 9)?);
    out.push(unary("exp", a.clone(), |g, x| g.exp(x), 10)?);
    out.push(check("sum", |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.sum(y)) }, &[a.clone()])?);
    out.push(check("mean", |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) }, &[a.clone()])?);

    let (x, w, bias) = (rand_t(&mut rng, &[5, 4], -1.0, 1.0), rand_t(&mut rng, &[4, 3], -1.0, 1.0), rand_t(&mut rng, &[3], -1.0, 1.0));
    out.push(check("linear", |g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; project(g, y, 11) }, &[x, w, bias])?);

    let (x, gam, bet) = (rand_t(&mut rng, &[4, 6], -2.0, 2.0), rand_t(&mut rng, &[6], 0.5, 1.5), rand_t(&mut rng, &[6], -0.5, 0.5));
    out.push(check("layer_norm", |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; project(g, y, 12) }, &[x, gam, bet])?);

    let (x, w, bias) = (rand_t(&mut rng, &[3, 5, 4, 2], -1.0, 1.0), rand_t(&mut rng, &[2, 3, 2, 2, 3], -1.0, 1.0), rand_t(&mut rng, &[3], -1.0, 1.0));
    out.push(check(
        "conv3d",
        |g, v| { let y = g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 1], [0, 1, 1])?; project(g, y, 13) },
        &[x, w, bias],
    )?);

    let (x, w, bias) = (rand_t(&mut rng, &[3, 4, 4, 2], -1.0, 1.0), rand_t(&mut rng, &[3, 3, 3, 2], -1.0, 1.0), rand_t(&mut rng, &[2], -1.0, 1.0));
    out.push(check("dwconv3d", |g, v| { let y = g.dwconv3d(v[0], v[1], v[2])?; project(g, y, 14) }, &[x, w, bias])?);

    let x = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let idx: Arc<Vec<usize>> = Arc::new((0..15).map(|i| (i * 7) % 12).collect());
    out.push(check("gather", move |g, v| { let y = g.gather(v[0], idx.clone(), &[3, 5])?; project(g, y, 15) }, &[x.clone()])?);
    out.push(check("reshape", |g, v| { let y = g.reshape(v[0], &[2, 6])?; project(g, y, 16) }, &[x.clone()])?);
    out.push(check("slice0", |g, v| { let y = g.slice0(v[0], 1, 3)?; project(g, y, 17) }, &[x.clone()])?);
    let x2 = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    out.push(check("concat_last", |g, v| { let y = g.concat_last(v[0], v[1])?; project(g, y, 18) }, &[x, x2])?);

    let (l, d, n) = (2 * 3 * 2, 3, 4);
    let orders = ScanKind::STB8.iter().map(|&k| scan_order(&ScanPath::new(k, 2, 3, 2))).collect::<Result<Vec<_>>>()?;
    let scan_params = [
        rand_t(&mut rng, &[l, d], -1.0, 1.0),
        rand_t(&mut rng, &[l, d], 0.05, 0.6),
        rand_t(&mut rng, &[d, n], -0.5, 1.0),
        rand_t(&mut rng, &[l, n], -1.0, 1.0),
        rand_t(&mut rng, &[l, n], -1.0, 1.0),
        rand_t(&mut rng, &[d], -1.0, 1.0),
    ];
    out.push(check(
        "selective_scan",
        |g, v| { let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], &orders)?; project(g, y, 19) },
        &scan_params,
    )?);

    let img = rand_t(&mut rng, &[2, 5, 6], 0.0, 1.0);
    out.push(check("sobel", |g, v| { let y = g.sobel(v[0])?; project(g, y, 20) }, &[img])?);
    let (x, target) = (rand_t(&mut rng, &[2, 6, 6], 0.0, 1.0), rand_t(&mut rng, &[2, 6, 6], 0.0, 1.0));
    out.push(check("tile_ssim", move |g, v| { let y = g.tile_ssim(v[0], &target, 3)?; project(g, y, 21) }, &[x])?);
    Ok(out)
}

fn random_ssm(rng: &mut ChaCha8Rng, d: usize, n: usize) -> SsmParams<f64> {
    let mut p = SsmParams::init(d, n, rng);
    p.d_skip = rand_t(rng, &[d], -1.0, 1.0);
    p.dt_bias = rand_t(rng, &[d], 0.0, 1.0);
    p
}

fn ssm_tensors(p: &SsmParams<f64>) -> Vec<Tensor<f64>> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

fn ssm_vars(v: &[Var]) -> SsmVars {
    SsmVars { a_log: v[0], d_skip: v[1], w_b: v[2], w_c: v[3], w_dt: v[4], dt_proj: v[5], dt_bias: v[6] }
}

/// The SSM layer on a single left-to-right sequence and under the eight
/// spatio-temporal orders.
pub fn ssm_layer(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (3, 4);
    let p = random_ssm(&mut rng, d, n);
    let mut out = Vec::new();
    for (name, dims, kinds) in [
        ("ssm_layer", (1, 1, 8), &[ScanKind::SpatialRowFwd][..]),
        ("ssm_layer_stb8", (2, 2, 3), &ScanKind::STB8[..]),
    ] {
        let (t, h, w) = dims;
        let orders = kinds.iter().map(|&k| scan_order(&ScanPath::new(k, t, h, w))).collect::<Result<Vec<_>>>()?;
        let mut params = vec![rand_t(&mut rng, &[t * h * w, d], -1.0, 1.0)];
        params.extend(ssm_tensors(&p));
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = ssm_layer_graph(g, v[0], &ssm_vars(&v[1..]), &orders)?;
            project(g, y, 30)
        };
        let r = grad_check(f, &params, COMPOSITE_EPS)?;
        out.push(CheckResult { name: name.to_string(), max_rel_err: r.max_rel_err, coords: r.coords_checked });
    }
    Ok(out)
}

/// One full VSS block per scan mode, with a non-zero output projection.
pub fn vss_block(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, dims) = (4, (3, 2, 3));
    let l = dims.0 * dims.1 * dims.2;
    let mut out = Vec::new();
    for mode in [ScanMode::Stb8, ScanMode::Spatial4, ScanMode::Temporal1] {
        let mut block = VssBlock::<f64>::init(c, c, 3, mode, &mut rng);
        block.w_out = rand_t(&mut rng, &[c, c], -1.5, 1.5);
        block.norm_g = rand_t(&mut rng, &[c], 0.5, 1.5);
        block.ssm = random_ssm(&mut rng, c, 3);
        let mut params = vec![rand_t(&mut rng, &[l, c], -1.0, 1.0)];
        params.extend(block.named().into_iter().map(|(_, t)| t.clone()));
        let name = format!("vss_block_{}", mode.name());
        // the skip term is subtracted: its O(1) value only adds round-off, and `add` is checked separately
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = block.graph(g, &v[1..], v[0], dims)?;
            let y = g.sub(y, v[0])?;
            project(g, y, 40)
        };
        let r = grad_check(f, &params, COMPOSITE_EPS)?;
        out.push(CheckResult { name, max_rel_err: r.max_rel_err, coords: r.coords_checked });
    }
    Ok(out)
}

/// `total_loss` for each task on a tiny two-frame clip.
pub fn losses(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 8, 8];
    let mut out = Vec::new();
    for task in TaskKind::ALL {
        let s1 = rand_t(&mut rng, &shape, 0.0, 1.0);
        let s2 = rand_t(&mut rng, &shape, 0.0, 1.0);
        let fused = rand_t(&mut rng, &shape, 0.0, 1.0);
        let w = LossWeights::for_task(task);
        let f = |g: &mut Graph<f64>, v: &[Var]| Ok(total_graph(g, task, w, v[0], &s1, &s2)?.total);
        let r = grad_check_sampled(f, &[fused], FD_EPS, None, seed)?;
        out.push(CheckResult { name: format!("total_loss_{}", task), max_rel_err: r.max_rel_err, coords: r.coords_checked });
    }
    Ok(out)
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(match suite {
        Suite::Primitives => primitives(seed)?,
        Suite::Ssm => ssm_layer(seed)?,
        Suite::Vss => vss_block(seed)?,
        Suite::Losses => losses(seed)?,
        Suite::All => {
            let mut v = primitives(seed)?;
            v.extend(ssm_layer(seed)?);
            v.extend(vss_block(seed)?);
            v.extend(losses(seed)?);
            v
        }
    })
}
