//! Deterministic tensor primitives, reverse-mode differentiation and a
//! central-difference gradient oracle.

pub mod graph;
pub mod kernels;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeom;

/// Layer norm over the last axis.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let c = *x.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!("layer_norm: gamma/beta must be [{}], got {:?} / {:?}", c, gamma.shape(), beta.shape()));
    }
    let (y, _, _) = kernels::layer_norm_fwd(x.data(), gamma.data(), beta.data(), c, eps);
    Tensor::new(x.shape(), y)
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(scalar::silu)
}

pub fn softplus<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(scalar::softplus)
}

/// Channel-first 3D convolution with zero padding.
///
/// `x[Cin, T, H, W]`, `kernel[Cout, Cin, kt, kh, kw]`, optional `bias[Cout]`;
/// returns `[Cout, T', H', W']` with `T' = (T + 2p - k) / s + 1` per axis.
pub fn conv3d<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 5 || ks[1] != xs[0] {
        return Err(dim_err!("conv3d: input {:?} incompatible with kernel {:?}", xs, ks));
    }
    let geom = ConvGeom {
        input: [xs[1], xs[2], xs[3]],
        kernel: [ks[2], ks[3], ks[4]],
        stride,
        padding,
        c_in: xs[0],
        c_out: ks[0],
    };
    let out = geom
        .output()
        .ok_or_else(|| dim_err!("conv3d: kernel {:?} larger than padded input {:?}", &ks[2..], &xs[1..]))?;
    if let Some(b) = bias {
        b.expect_shape(&[ks[0]])?;
    }
    let x_cl = x.permute(&[1, 2, 3, 0])?;
    let w_cl = kernel.permute(&[2, 3, 4, 1, 0])?;
    let y = kernels::conv3d_fwd(x_cl.data(), w_cl.data(), bias.map(|b| b.data()), &geom);
    Tensor::new(&[out[0], out[1], out[2], geom.c_out], y)?.permute(&[3, 0, 1, 2])
}

/// Sobel gradient magnitude of an `[H, W]` image with replicate borders.
pub fn sobel_magnitude<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let s = img.shape();
    if s.len() != 2 || s[0] < 3 || s[1] < 3 {
        return Err(dim_err!("sobel_magnitude needs an [H, W] image with H, W >= 3, got {:?}", s));
    }
    Tensor::new(s, kernels::sobel_mag_fwd(img.data(), s[0], s[1]))
}

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(param index, flat coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn eval_scalar<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(contract_err!("grad_check function must return a scalar, got {:?}", v.shape()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is not finite: {}", v)));
    }
    Ok(v)
}

/// Compare `backward()` against central differences over every coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, eps, None, 0)
}

/// Like [`grad_check`] but checks at most `max_coords` coordinates drawn with `seed`.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract_err!("grad_check eps must lie in [1e-7, 1e-3], got {}", eps));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Evaluation("function value is not finite".into()));
    }
    let grads = g.backward(out)?;

    let mut coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(pi, p)| (0..p.numel()).map(move |i| (pi, i))).collect();
    if let Some(k) = max_coords {
        if k < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            coords.shuffle(&mut rng);
            coords.truncate(k);
            coords.sort_unstable();
        }
    }

    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, i) in coords {
        let analytic = grads.get(vars[pi]).map(|t| t.data()[i]).unwrap_or(0.0);
        let orig = work[pi].data()[i];
        work[pi].data_mut()[i] = orig + eps;
        let fp = eval_scalar(&f, &work)?;
        work[pi].data_mut()[i] = orig - eps;
        let fm = eval_scalar(&f, &work)?;
        work[pi].data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((pi, i, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_matches_hand_values() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 0.0).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let x = Tensor::<f64>::full(&[2, 4], 3.25);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Tensor::<f64>::from_fn(&[2, 4], |i| i as f64 * 0.7);
        let beta = Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.4]).unwrap();
        let y = layer_norm(&x, &Tensor::zeros(&[4]), &beta, 1e-5).unwrap();
        assert_eq!(&y.data()[..4], beta.data());
        assert!(layer_norm(&x, &Tensor::zeros(&[3]), &beta, 1e-5).is_err());
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.0, 20.0, -800.0]).unwrap();
        let s = silu(&x);
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 20.0).abs() < 1e-6);
        let sp = softplus(&x);
        assert!((sp.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(sp.data()[2] >= 0.0 && sp.data()[2].is_finite());
        let big = softplus(&Tensor::<f32>::full(&[1], 500.0));
        assert_eq!(big.data()[0], 500.0);
    }

    #[test]
    fn conv_identity_and_shapes() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin());
        // identity kernel: out channel c copies in channel c
        let k = Tensor::from_fn(&[2, 2, 1, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 });
        let y = conv3d(&x, &k, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(y, x);

        let zero = Tensor::<f64>::zeros(&[1, 4, 8, 8]);
        let k = Tensor::from_fn(&[32, 1, 1, 2, 2], |i| i as f64);
        let y = conv3d(&zero, &k, Some(&Tensor::zeros(&[32])), [1, 2, 2], [0; 3]).unwrap();
        assert_eq!(y.shape(), &[32, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let big = Tensor::<f64>::zeros(&[1, 1, 1, 5, 5]);
        assert!(conv3d(&Tensor::zeros(&[1, 1, 3, 3]), &big, None, [1; 3], [0; 3]).is_err());
    }

    #[test]
    fn sobel_cases() {
        let flat = Tensor::<f64>::full(&[5, 5], 0.4);
        assert!(sobel_magnitude(&flat).unwrap().data().iter().all(|&v| v == 0.0));

        // step 0 -> 1 between columns 2 and 3
        let step = Tensor::<f64>::from_fn(&[6, 6], |i| if i % 6 >= 3 { 1.0 } else { 0.0 });
        let m = sobel_magnitude(&step).unwrap();
        assert_eq!(m.at(&[3, 2]), 4.0);
        assert_eq!(m.at(&[3, 3]), 4.0);
        assert_eq!(m.at(&[3, 0]), 0.0);

        // ramp along W: interior gx = 8 * slope
        let ramp = Tensor::<f64>::from_fn(&[5, 7], |i| (i % 7) as f64 * 0.1);
        let m = sobel_magnitude(&ramp).unwrap();
        for i in 0..5 {
            for j in 1..6 {
                assert!((m.at(&[i, j]) - 0.8).abs() < 1e-12);
            }
        }
        assert!(sobel_magnitude(&Tensor::<f64>::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let p = Tensor::<f64>::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let quad = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.scale(sq, 1.5);
            Ok(g.sum(s))
        };
        let r = grad_check(quad, std::slice::from_ref(&p), 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-9, "{:?}", r);

        let constant = |g: &mut Graph<f64>, v: &[Var]| {
            let z = g.scale(v[0], 0.0);
            Ok(g.sum(z))
        };
        let r = grad_check(constant, std::slice::from_ref(&p), 1e-5).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn grad_check_validates_inputs() {
        let p = Tensor::<f64>::full(&[1], 1.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| Ok(g.sum(v[0]));
        assert!(grad_check(f, std::slice::from_ref(&p), 1e-2).is_err());
        let bad = |g: &mut Graph<f64>, v: &[Var]| {
            let z = g.scale(v[0], f64::INFINITY);
            Ok(g.sum(z))
        };
        assert!(matches!(grad_check(bad, &[p], 1e-5), Err(Error::Evaluation(_))));
    }
}
