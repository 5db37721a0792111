//! Discretized selective state-space recurrence.
//!
//! `h_t = Ā_t ⊙ h_{t-1} + B̄_t u_t`, `y_t = <C_t, h_t> + D ⊙ u_t` with a diagonal
//! state matrix `A = -exp(A_log)`, zero-order hold `Ā = exp(ΔA)` and the Euler
//! input term `B̄ = ΔB`.

pub mod kernel;

use std::sync::Arc;

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;
use crate::scan::ScanOrder;
use crate::tensor::Tensor;

/// Default number of state channels per inner channel.
pub const DEFAULT_STATE_DIM: usize = 8;
/// Default chunk length of the blocked scan.
pub const DEFAULT_CHUNK: usize = 64;
/// Target initial step size; the Δ bias is `softplus⁻¹(DT_INIT)`.
pub const DT_INIT: f64 = 0.1;

/// Input-dependent state-space parameters for `d_inner` channels and `n` states.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<S: Scalar> {
    /// `[d_inner, n]`, `A = -exp(a_log)`.
    pub a_log: Tensor<S>,
    /// `[d_inner]`
    pub d_skip: Tensor<S>,
    /// `[d_inner, n]`: `B_t = x_t W_B`.
    pub w_b: Tensor<S>,
    /// `[d_inner, n]`: `C_t = x_t W_C`.
    pub w_c: Tensor<S>,
    /// `[d_inner, 1]`: rank-1 step projection.
    pub w_dt: Tensor<S>,
    /// `[1, d_inner]`: broadcast of the step scalar to channels.
    pub dt_proj: Tensor<S>,
    /// `[d_inner]`
    pub dt_bias: Tensor<S>,
}

/// Graph handles for [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt: Var,
    pub dt_proj: Var,
    pub dt_bias: Var,
}

pub(crate) fn uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..=bound)))
}

impl<S: Scalar> SsmParams<S> {
    /// Standard selective-SSM initialization: `A_log = ln(1..=n)` per channel, unit skip,
    /// projections uniform in `±1/sqrt(fan_in)`, and Δ starting near [`DT_INIT`].
    pub fn init<R: Rng>(d_inner: usize, n: usize, rng: &mut R) -> Self {
        let a_log = Tensor::from_fn(&[d_inner, n], |i| S::lit(((i % n) + 1) as f64).ln());
        let bound = 1.0 / (d_inner as f64).sqrt();
        SsmParams {
            a_log,
            d_skip: Tensor::full(&[d_inner], S::one()),
            w_b: uniform(rng, &[d_inner, n], bound),
            w_c: uniform(rng, &[d_inner, n], bound),
            w_dt: uniform(rng, &[d_inner, 1], bound),
            dt_proj: uniform(rng, &[1, d_inner], 1.0),
            dt_bias: Tensor::full(&[d_inner], S::lit(DT_INIT.exp_m1().ln())),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_skip.numel()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> [(&'static str, &Tensor<S>); 7] {
        [
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_dt", &self.w_dt),
            ("dt_proj", &self.dt_proj),
            ("dt_bias", &self.dt_bias),
        ]
    }

    pub fn bind(&self, g: &mut Graph<S>) -> SsmVars {
        SsmVars {
            a_log: g.param(self.a_log.clone()),
            d_skip: g.param(self.d_skip.clone()),
            w_b: g.param(self.w_b.clone()),
            w_c: g.param(self.w_c.clone()),
            w_dt: g.param(self.w_dt.clone()),
            dt_proj: g.param(self.dt_proj.clone()),
            dt_bias: g.param(self.dt_bias.clone()),
        }
    }
}

/// Zero-order-hold discretization.
///
/// `a[D, N]`, `b[L, N]`, `delta[L, D]` → `(Ā, B̄)` both `[L, D, N]`.
pub fn discretize<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, delta: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (d, n) = match a.shape() {
        [d, n] => (*d, *n),
        s => return Err(dim_err!("discretize: A must be [D, N], got {:?}", s)),
    };
    let l = match delta.shape() {
        [l, dd] if *dd == d => *l,
        s => return Err(dim_err!("discretize: delta must be [L, {}], got {:?}", d, s)),
    };
    b.expect_shape(&[l, n])?;
    if let Some(bad) = delta.data().iter().find(|v| !(**v > S::zero())) {
        return Err(contract_err!("discretize: step sizes must be positive, found {}", bad));
    }
    let mut a_bar = Vec::with_capacity(l * d * n);
    let mut b_bar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for ch in 0..d {
            let dl = delta.data()[t * d + ch];
            for k in 0..n {
                a_bar.push((dl * a.data()[ch * n + k]).exp());
                b_bar.push(dl * b.data()[t * n + k]);
            }
        }
    }
    Ok((Tensor::new(&[l, d, n], a_bar)?, Tensor::new(&[l, d, n], b_bar)?))
}

fn scan_shapes<S: Scalar>(
    u: &Tensor<S>,
    a_bar: &Tensor<S>,
    b_bar: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    let (l, d) = match u.shape() {
        [l, d] => (*l, *d),
        s => return Err(dim_err!("scan: u must be [L, D], got {:?}", s)),
    };
    let n = match a_bar.shape() {
        [ll, dd, n] if *ll == l && *dd == d => *n,
        s => return Err(dim_err!("scan: Ā must be [{}, {}, N], got {:?}", l, d, s)),
    };
    b_bar.expect_shape(&[l, d, n])?;
    c.expect_shape(&[l, n])?;
    d_skip.expect_shape(&[d])?;
    Ok((l, d, n))
}

/// Strict left-to-right recurrence with `h_0 = 0`. Serves as the oracle.
pub fn selective_scan_ref<S: Scalar>(
    u: &Tensor<S>,
    a_bar: &Tensor<S>,
    b_bar: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (l, d, n) = scan_shapes(u, a_bar, b_bar, c, d_skip)?;
    let mut h = vec![S::zero(); d * n];
    let mut y = Vec::with_capacity(l * d);
    for t in 0..l {
        for ch in 0..d {
            let uv = u.data()[t * d + ch];
            let mut acc = S::zero();
            for k in 0..n {
                let i = (t * d + ch) * n + k;
                let hv = &mut h[ch * n + k];
                *hv = a_bar.data()[i] * *hv + b_bar.data()[i] * uv;
                acc += c.data()[t * n + k] * *hv;
            }
            y.push(acc + d_skip.data()[ch] * uv);
        }
    }
    Tensor::new(&[l, d], y)
}

/// Blocked evaluation: each chunk's input terms are formed first, then the
/// recurrence runs over the chunk with the hidden state carried across chunks.
pub fn selective_scan<S: Scalar>(
    u: &Tensor<S>,
    a_bar: &Tensor<S>,
    b_bar: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
    chunk: usize,
) -> Result<Tensor<S>> {
    if chunk < 1 {
        return Err(contract_err!("selective_scan chunk must be >= 1, got {}", chunk));
    }
    let (l, d, n) = scan_shapes(u, a_bar, b_bar, c, d_skip)?;
    let dn = d * n;
    let mut h = vec![S::zero(); dn];
    let mut bu = vec![S::zero(); chunk.min(l.max(1)) * dn];
    let mut y = vec![S::zero(); l * d];
    let mut start = 0;
    while start < l {
        let end = (start + chunk).min(l);
        for t in start..end {
            for ch in 0..d {
                let uv = u.data()[t * d + ch];
                for k in 0..n {
                    bu[(t - start) * dn + ch * n + k] = b_bar.data()[(t * d + ch) * n + k] * uv;
                }
            }
        }
        for t in start..end {
            let ab = &a_bar.data()[t * dn..(t + 1) * dn];
            let cr = &c.data()[t * n..(t + 1) * n];
            for ch in 0..d {
                let mut acc = S::zero();
                for k in 0..n {
                    let hv = &mut h[ch * n + k];
                    *hv = ab[ch * n + k] * *hv + bu[(t - start) * dn + ch * n + k];
                    acc += cr[k] * *hv;
                }
                y[t * d + ch] = acc + d_skip.data()[ch] * u.data()[t * d + ch];
            }
        }
        start = end;
    }
    Tensor::new(&[l, d], y)
}

/// Input-dependent SSM layer on the graph: `x[L, D]` scanned along every order, outputs summed.
pub fn ssm_layer_graph<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &SsmVars,
    orders: &[Arc<ScanOrder>],
) -> Result<Var> {
    let b = g.linear(x, p.w_b, None)?;
    let c = g.linear(x, p.w_c, None)?;
    let dt_raw = g.linear(x, p.w_dt, None)?;
    let dt_pre = g.linear(dt_raw, p.dt_proj, Some(p.dt_bias))?;
    let delta = g.softplus(dt_pre);
    g.selective_scan(x, delta, p.a_log, b, c, p.d_skip, orders)
}

/// Single left-to-right SSM layer on a plain sequence `x[L, D]`.
pub fn ssm_layer_forward<S: Scalar>(x_seq: &Tensor<S>, params: &SsmParams<S>) -> Result<Tensor<S>> {
    let l = match x_seq.shape() {
        [l, d] if *d == params.d_inner() => *l,
        s => return Err(dim_err!("ssm_layer_forward: expected [L, {}], got {:?}", params.d_inner(), s)),
    };
    let mut g = Graph::no_grad();
    let x = g.constant(x_seq.clone());
    let p = params.bind(&mut g);
    let order = Arc::new(ScanOrder::identity(l));
    let y = ssm_layer_graph(&mut g, x, &p, &[order])?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn discretize_examples() {
        let (ab, bb) = discretize(&t1(&[-1.0], &[1, 1]), &t1(&[2.0], &[1, 1]), &t1(&[1.0], &[1, 1])).unwrap();
        assert!((ab.item() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((ab.item() - 0.3679).abs() < 1e-4);
        assert_eq!(bb.item(), 2.0);
        let (_, bb) = discretize(&t1(&[-1.0], &[1, 1]), &t1(&[2.0], &[1, 1]), &t1(&[0.5], &[1, 1])).unwrap();
        assert_eq!(bb.item(), 1.0);
        let (ab, bb) = discretize(&t1(&[-3.0], &[1, 1]), &t1(&[2.0], &[1, 1]), &t1(&[1e-12], &[1, 1])).unwrap();
        assert!((ab.item() - 1.0).abs() < 1e-10 && bb.item().abs() < 1e-10);
        assert!(discretize(&t1(&[-1.0], &[1, 1]), &t1(&[2.0], &[1, 1]), &t1(&[0.0], &[1, 1])).is_err());
    }

    #[test]
    fn scalar_recurrence_unrolls() {
        let u = t1(&[1.0, 0.0, 0.0], &[3, 1]);
        let ab = Tensor::full(&[3, 1, 1], 0.5);
        let bb = Tensor::full(&[3, 1, 1], 1.0);
        let c = Tensor::full(&[3, 1], 1.0);
        let y = selective_scan_ref(&u, &ab, &bb, &c, &t1(&[0.0], &[1])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn skip_only_and_zero_input() {
        let y = selective_scan_ref(
            &t1(&[3.0], &[1, 1]),
            &Tensor::full(&[1, 1, 1], 0.5),
            &Tensor::full(&[1, 1, 1], 1.0),
            &Tensor::zeros(&[1, 1]),
            &t1(&[2.0], &[1]),
        )
        .unwrap();
        assert_eq!(y.data(), &[6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ab = uniform::<f64, _>(&mut rng, &[5, 2, 3], 1.0);
        let y = selective_scan_ref(&Tensor::zeros(&[5, 2]), &ab, &ab, &Tensor::full(&[5, 3], 1.0), &Tensor::full(&[2], 1.0))
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_one_is_bit_identical_and_zero_chunk_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = uniform::<f32, _>(&mut rng, &[9, 3], 1.0);
        let ab = uniform::<f32, _>(&mut rng, &[9, 3, 4], 1.0).map(|v| v.abs());
        let bb = uniform::<f32, _>(&mut rng, &[9, 3, 4], 1.0);
        let c = uniform::<f32, _>(&mut rng, &[9, 4], 1.0);
        let d = uniform::<f32, _>(&mut rng, &[3], 1.0);
        let r = selective_scan_ref(&u, &ab, &bb, &c, &d).unwrap();
        assert_eq!(selective_scan(&u, &ab, &bb, &c, &d, 1).unwrap(), r);
        assert!(selective_scan(&u, &ab, &bb, &c, &d, 0).is_err());
    }

    #[test]
    fn layer_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SsmParams::<f32>::init(6, 4, &mut rng);
        let x = uniform::<f32, _>(&mut rng, &[17, 6], 1.0);
        let y1 = ssm_layer_forward(&x, &p).unwrap();
        let y2 = ssm_layer_forward(&x, &p).unwrap();
        assert_eq!(y1.shape(), x.shape());
        assert_eq!(y1, y2);
        assert!(ssm_layer_forward(&Tensor::<f32>::zeros(&[4, 5]), &p).is_err());
    }

    #[test]
    fn initial_step_is_near_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SsmParams::<f64>::init(4, 8, &mut rng);
        let sp = crate::scalar::softplus(p.dt_bias.data()[0]);
        assert!((sp - DT_INIT).abs() < 1e-12);
        assert!(p.a_log.data()[..8].iter().enumerate().all(|(i, &v)| (v - ((i + 1) as f64).ln()).abs() < 1e-15));
    }
}
