use mambavf::model::{checkpoint, fuse_features, vss_block_forward, Model, ModelConfig, ResMode, ScanMode, VssBlock};
use mambavf::{Model32, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: ScanMode) -> ModelConfig {
    ModelConfig { embed_dim: 8, depth: 1, state_dim: 4, res_blocks: 1, scan_mode: mode, ..ModelConfig::default() }
}

fn video(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn randomize(m: &mut Model32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
}

#[test]
fn embed_shape_and_linearity() {
    let mut m = Model32::new(ModelConfig::default(), 1).unwrap();
    let v = video(2, &[1, 4, 1, 8, 8]);
    let e = m.tubelet_embed(0, &v).unwrap();
    assert_eq!(e.shape(), &[1, 32, 4, 4, 4]);
    m.encoders[0].embed_b.data_mut().iter_mut().for_each(|b| *b = 0.0);
    let e = m.tubelet_embed(0, &v).unwrap();
    let scaled = m.tubelet_embed(0, &v.scale(3.0)).unwrap();
    assert!(scaled.max_abs_diff(&e.scale(3.0)).unwrap() < 1e-5);
    let zero = m.tubelet_embed(0, &Tensor::zeros(&[1, 4, 1, 8, 8])).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
}

#[test]
fn fresh_blocks_are_identity_in_every_mode() {
    for mode in [ScanMode::Stb8, ScanMode::Spatial4, ScanMode::Temporal1] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = VssBlock::<f64>::init(4, 4, 3, mode, &mut rng);
        let x = Tensor::from_fn(&[4, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(vss_block_forward(&x, &block).unwrap(), x, "{mode}");
    }
}

#[test]
fn block_keeps_shape_with_trained_projection() {
    for mode in [ScanMode::Stb8, ScanMode::Spatial4, ScanMode::Temporal1] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = VssBlock::<f64>::init(4, 4, 3, mode, &mut rng);
        block.w_out.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x = Tensor::from_fn(&[4, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let y = vss_block_forward(&x, &block).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x).unwrap() > 1e-6);
    }
}

#[test]
fn residual_identity_makes_encoder_equal_embedding() {
    let m = Model32::new(small(ScanMode::Stb8), 5).unwrap();
    let v = video(6, &[1, 5, 1, 8, 8]);
    assert_eq!(m.encode_stream(1, &v).unwrap(), m.tubelet_embed(1, &v).unwrap());
    let d0 = Model32::new(ModelConfig { depth: 0, ..small(ScanMode::Stb8) }, 5).unwrap();
    assert_eq!(d0.encode_stream(0, &v).unwrap(), d0.tubelet_embed(0, &v).unwrap());
}

#[test]
fn default_encoder_shape_and_stream_independence() {
    let m = Model32::new(ModelConfig::default(), 7).unwrap();
    let v = video(8, &[1, 5, 1, 32, 32]);
    let a = m.tubelet_embed(0, &v).unwrap();
    let b = m.tubelet_embed(1, &v).unwrap();
    assert_eq!(a.shape(), &[1, 32, 5, 16, 16]);
    assert_ne!(a, b);
}

#[test]
fn fusion_concatenates_channels() {
    let f1 = video(9, &[1, 4, 3, 2, 2]);
    let f2 = video(10, &[1, 4, 3, 2, 2]);
    let f = fuse_features(&f1, &f2).unwrap();
    assert_eq!(f.shape(), &[1, 8, 3, 2, 2]);
    let half = 4 * 3 * 2 * 2;
    assert_eq!(&f.data()[..half], f1.data());
    assert_eq!(&f.data()[half..], f2.data());
    let same = fuse_features(&f1, &f1).unwrap();
    assert_eq!(&same.data()[..half], &same.data()[half..]);
}

#[test]
fn decoder_shapes_and_zero_features() {
    let mut m = Model32::new(ModelConfig::default(), 11).unwrap();
    let v = video(12, &[1, 5, 1, 32, 32]);
    let y = m.forward(&v, &v.map(|x| 1.0 - x)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 32, 32]);
    for t in m.tensors_mut() {
        if t.ndim() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let zero = m.decode(&Tensor::zeros(&[1, 64, 5, 16, 16])).unwrap();
    assert_eq!(zero.shape(), &[1, 1, 32, 32]);
    assert_eq!(zero.max_abs(), 0.0);
    let r3 = Model32::new(ModelConfig { decoder_resblocks: ResMode::Res3d, ..small(ScanMode::Stb8) }, 11).unwrap();
    let v8 = video(13, &[1, 5, 1, 8, 8]);
    assert_eq!(r3.forward(&v8, &v8).unwrap().shape(), &[1, 1, 8, 8]);
}

#[test]
fn forward_is_deterministic_and_stream_asymmetric() {
    let mut m = Model32::new(small(ScanMode::Stb8), 14).unwrap();
    randomize(&mut m, 15);
    let a = video(16, &[1, 5, 1, 8, 8]);
    let b = video(17, &[1, 5, 1, 8, 8]);
    let y = m.forward(&a, &b).unwrap();
    assert_eq!(y, m.forward(&a, &b).unwrap());
    assert_ne!(y, m.forward(&b, &a).unwrap());
}

#[test]
fn sliding_window_cases() {
    let mut m = Model32::new(small(ScanMode::Stb8), 18).unwrap();
    randomize(&mut m, 19);
    let a = video(20, &[1, 5, 1, 8, 8]);
    let b = video(21, &[1, 5, 1, 8, 8]);
    let fused = m.fuse_video(&a, &b).unwrap();
    assert_eq!(fused.shape(), &[1, 5, 1, 8, 8]);
    let center = m.forward(&a, &b).unwrap().index0(0).unwrap();
    assert_eq!(fused.index0(0).unwrap().index0(2).unwrap(), center);

    let frame = video(22, &[1, 1, 1, 8, 8]);
    let stat = Tensor::stack(&vec![frame.index0(0).unwrap().index0(0).unwrap(); 4]).unwrap().reshape(&[1, 4, 1, 8, 8]).unwrap();
    let out = m.fuse_video(&stat, &stat).unwrap().index0(0).unwrap();
    for t in 1..4 {
        assert_eq!(out.index0(t).unwrap(), out.index0(0).unwrap());
    }
    assert_eq!(m.fuse_video(&frame, &frame).unwrap().shape(), &[1, 1, 1, 8, 8]);
}

#[test]
fn single_frame_stb8_matches_doubled_spatial4() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut stb = VssBlock::<f64>::init(4, 4, 3, ScanMode::Stb8, &mut rng);
    stb.w_out.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let mut sp = stb.clone();
    sp.mode = ScanMode::Spatial4;
    // the STB8 kernel has a temporal extent; with one frame only its middle slice sees data
    let k = stb.conv_w.shape().to_vec();
    let mid = k[0] / 2;
    let per = k[1] * k[2] * k[3];
    sp.conv_w = Tensor::new(&[1, k[1], k[2], k[3]], stb.conv_w.data()[mid * per..(mid + 1) * per].to_vec()).unwrap();
    let x = Tensor::from_fn(&[4, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let a = vss_block_forward(&x, &stb).unwrap().sub(&x).unwrap();
    let b = vss_block_forward(&x, &sp).unwrap().sub(&x).unwrap();
    // every STB8 direction duplicates a spatial one when T = 1
    assert!(a.max_abs_diff(&b.scale(2.0)).unwrap() < 1e-12);
}

#[test]
fn params_do_not_depend_on_resolution() {
    let m = Model32::new(ModelConfig::default(), 0).unwrap();
    let n = m.num_params();
    let v = video(24, &[1, 5, 1, 16, 24]);
    assert_eq!(m.forward(&v, &v).unwrap().shape(), &[1, 1, 16, 24]);
    assert_eq!(m.num_params(), n);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = Model32::new(small(ScanMode::Spatial4), 25).unwrap();
    randomize(&mut m, 26);
    let bytes = checkpoint::to_bytes(&m);
    assert_eq!(&bytes[..4], b"MVF1");
    let back: Model32 = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes::<f32>(&bad).is_err());
}

#[test]
fn cast_round_trip_keeps_f32_values() {
    let m = Model32::new(small(ScanMode::Temporal1), 27).unwrap();
    let back: Model<f32> = m.cast::<f64>().cast();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn block_output_shape_holds(t in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
        for mode in [ScanMode::Stb8, ScanMode::Spatial4, ScanMode::Temporal1] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut block = VssBlock::<f64>::init(3, 3, 2, mode, &mut rng);
            block.w_out.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let x = Tensor::from_fn(&[3, t, h, w], |_| rng.gen_range(-1.0..1.0));
            let y = vss_block_forward(&x, &block).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.all_finite());
        }
    }
}
