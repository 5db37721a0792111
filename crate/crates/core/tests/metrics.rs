use mambavf::metrics::{flicker, metric_report, mutual_information, qabf, ssim, MI_BINS, SSIM_WINDOW};
use mambavf::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0))
}

fn flip(x: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[h, w], |i| x.data()[(i / w) * w + (w - 1 - i % w)])
}

fn checker(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, n], |i| ((i / n + i % n) % 2) as f64)
}

#[test]
fn ssim_cases() {
    let x = rand_img(1, 16, 16);
    assert!((ssim(&x, &x, SSIM_WINDOW).unwrap() - 1.0).abs() < 1e-12);
    let c = checker(16);
    assert!(ssim(&c, &c.map(|v| 1.0 - v), SSIM_WINDOW).unwrap() < 0.0);
    let y = rand_img(2, 16, 16);
    assert_eq!(ssim(&x, &y, SSIM_WINDOW).unwrap(), ssim(&y, &x, SSIM_WINDOW).unwrap());
}

#[test]
fn mi_cases() {
    let two = Tensor::from_fn(&[8, 8], |i| if i < 32 { 0.0 } else { 1.0 });
    assert!((mutual_information(&two, &two, MI_BINS).unwrap() - 1.0).abs() < 1e-12);
    let c = Tensor::full(&[8, 8], 0.4);
    let x = rand_img(3, 8, 8);
    assert_eq!(mutual_information(&c, &x, MI_BINS).unwrap(), 0.0);
    let y = rand_img(4, 8, 8);
    assert!((mutual_information(&x, &y, MI_BINS).unwrap() - mutual_information(&y, &x, MI_BINS).unwrap()).abs() < 1e-12);
}

#[test]
fn qabf_cases() {
    let ramp = Tensor::from_fn(&[12, 12], |i| ((i / 12) as f64 * 0.05 + (i % 12) as f64 * 0.03).min(1.0));
    assert!(qabf(&ramp, &ramp, &ramp).unwrap() >= 0.95);
    let flat = Tensor::full(&[12, 12], 0.5);
    let c = checker(12);
    assert!(qabf(&flat, &c, &ramp).unwrap() < 1e-3);
    let f = rand_img(5, 12, 12);
    let (a, b) = (rand_img(6, 12, 12), rand_img(7, 12, 12));
    assert!((qabf(&f, &a, &b).unwrap() - qabf(&f, &b, &a).unwrap()).abs() < 1e-12);
}

#[test]
fn flicker_cases() {
    let stat = Tensor::full(&[3, 4, 4], 0.7);
    assert_eq!(flicker(&stat).unwrap(), 0.0);
    let alt = Tensor::from_fn(&[4, 4, 4], |i| if (i / 16) % 2 == 0 { 0.4 } else { 0.6 });
    assert!((flicker(&alt).unwrap() - 0.2).abs() < 1e-12);
    // one bright pixel moves one step: two pixels change by 1.0 out of 16
    let mut d = vec![0.0; 32];
    d[5] = 1.0;
    d[16 + 6] = 1.0;
    let moving = Tensor::new(&[2, 4, 4], d).unwrap();
    assert!((flicker(&moving).unwrap() - 0.125).abs() < 1e-12);
    assert!(flicker(&Tensor::<f64>::zeros(&[1, 4, 4])).is_err());
}

#[test]
fn report_averages_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut clip = || Tensor::from_fn(&[3, 12, 12], |_| rng.gen_range(0.0..1.0));
    let (f, a, b) = (clip(), clip(), clip());
    let r = metric_report(&f, &a, &b).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(r.frame_ssim.len(), 3);
    assert_eq!(r.frame_flicker.len(), 2);
    assert!((r.ssim_mean - mean(&r.frame_ssim)).abs() < 1e-12);
    assert!((r.mi - mean(&r.frame_mi)).abs() < 1e-12);
    assert!((r.qabf - mean(&r.frame_qabf)).abs() < 1e-12);
    assert!((r.flicker - flicker(&f).unwrap()).abs() < 1e-12);
    let text = r.to_record();
    assert!(text.lines().all(|l| l.contains('=')));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flip_invariance_and_mi_bounds(seed in 0u64..10_000, h in 11usize..15, w in 11usize..15) {
        let (f, a, b) = (rand_img(seed, h, w), rand_img(seed + 1, h, w), rand_img(seed + 2, h, w));
        let (ff, fa, fb) = (flip(&f), flip(&a), flip(&b));
        prop_assert!((ssim(&f, &a, SSIM_WINDOW).unwrap() - ssim(&ff, &fa, SSIM_WINDOW).unwrap()).abs() < 1e-12);
        prop_assert!((qabf(&f, &a, &b).unwrap() - qabf(&ff, &fa, &fb).unwrap()).abs() < 1e-12);
        let mi = mutual_information(&f, &a, MI_BINS).unwrap();
        prop_assert!((mi - mutual_information(&ff, &fa, MI_BINS).unwrap()).abs() < 1e-12);
        let hf = mutual_information(&f, &f, MI_BINS).unwrap();
        let ha = mutual_information(&a, &a, MI_BINS).unwrap();
        prop_assert!(mi >= 0.0 && mi <= hf.min(ha) + 1e-12);
    }
}
