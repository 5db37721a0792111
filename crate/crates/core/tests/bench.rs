use mambavf::bench::{
    attention_baseline, attention_flops, count_params, estimate_flops, matmul_flops, measure_latency, vss_block_flops, Attention,
    Latency, REFERENCE_DIMS,
};
use mambavf::model::{ModelConfig, ScanMode};
use mambavf::{Model32, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_layer_count() {
    // a 4 -> 3 projection with bias, counted the same way the model counts tensors
    let w: Tensor<f32> = Tensor::zeros(&[4, 3]);
    let b: Tensor<f32> = Tensor::zeros(&[3]);
    assert_eq!(w.numel() + b.numel(), 15);
    assert_eq!(matmul_flops(2, 4, 3), 48);
}

#[test]
fn default_params_and_width_scaling() {
    let small = count_params(&Model32::new(ModelConfig::default(), 0).unwrap());
    assert!((300_000..=1_500_000).contains(&small), "{small}");
    let wide = count_params(&Model32::new(ModelConfig { embed_dim: 64, ..ModelConfig::default() }, 0).unwrap());
    let r = wide as f64 / small as f64;
    assert!(r > 3.0 && r < 4.5, "{r}");
}

#[test]
fn flops_are_linear_in_frames() {
    let cfg = ModelConfig::default();
    let a = estimate_flops(&cfg, 4, 32, 32).unwrap();
    let b = estimate_flops(&cfg, 8, 32, 32).unwrap();
    let r = b.total as f64 / a.total as f64;
    assert!((1.99..=2.01).contains(&r), "{r}");
    assert_eq!(a.total, a.conv + a.projection + a.scan);
    let (t, h, w) = REFERENCE_DIMS;
    let reference = estimate_flops(&cfg, t, h, w).unwrap().total as f64 / 1e9;
    assert!(reference > 0.877 && reference < 87.7, "{reference}");
}

#[test]
fn ssm_flops_double_with_tokens() {
    for mode in [ScanMode::Stb8, ScanMode::Spatial4, ScanMode::Temporal1] {
        let a = vss_block_flops(4096, 32, 32, 8, mode);
        let b = vss_block_flops(8192, 32, 32, 8, mode);
        assert_eq!(b.scan, 2 * a.scan);
        assert_eq!(b.projection, 2 * a.projection);
        assert_eq!(b.conv, 2 * a.conv);
    }
    let (_, s1) = attention_flops(4096, 32);
    let (_, s2) = attention_flops(8192, 32);
    assert_eq!(s2, 4 * s1);
}

#[test]
fn attention_single_token_is_value_projection() {
    let p = Attention::<f64>::init(5, 1);
    let x = Tensor::from_fn(&[1, 5], |i| i as f64 * 0.3 - 0.5);
    let y = attention_baseline(&x, &p).unwrap();
    let v: Vec<f64> = (0..5).map(|j| (0..5).map(|i| x.data()[i] * p.wv.data()[i * 5 + j]).sum()).collect();
    for (a, b) in y.data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(attention_baseline(&Tensor::<f64>::zeros(&[0, 5]), &p).is_err());
}

#[test]
fn latency_contracts() {
    let m = Model32::new(ModelConfig { embed_dim: 4, depth: 1, state_dim: 2, res_blocks: 1, ..ModelConfig::default() }, 0).unwrap();
    let v: Tensor<f32> = Tensor::full(&[1, 1, 8, 8], 0.5);
    assert!(measure_latency(&m, &v, &v, 4, 1).is_err());
    assert!(measure_latency(&m, &v, &v, 5, 0).is_err());
    let r = measure_latency(&m, &v, &v, 5, 1).unwrap();
    assert!(r.latency.p10 <= r.latency.median && r.latency.median <= r.latency.p90);
    assert_eq!(r.latency.samples.len(), 5);
    assert_eq!(r.params, m.num_params());
    assert!(r.to_record().contains("median_ms="));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn median_lies_between_percentiles(samples in prop::collection::vec(0.0f64..1e3, 1..40)) {
        let l = Latency::from_samples(samples).unwrap();
        prop_assert!(l.p10 <= l.median && l.median <= l.p90);
    }

    #[test]
    fn attention_is_permutation_equivariant(l in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Attention::<f64>::init(4, seed);
        let x = Tensor::from_fn(&[l, 4], |_| rng.gen_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let px = Tensor::from_fn(&[l, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let y = attention_baseline(&x, &p).unwrap();
        let py = attention_baseline(&px, &p).unwrap();
        for i in 0..l * 4 {
            prop_assert!((py.data()[i] - y.data()[perm[i / 4] * 4 + i % 4]).abs() < 1e-12);
        }
    }
}
