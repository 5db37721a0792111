use std::fs;

use mambavf::io::config::RunConfig;
use mambavf::io::{pnm, read_frame_dir, read_vtf, vtf, write_frame_dir, write_vtf};
use mambavf::losses::TaskKind;
use mambavf::model::ScanMode;
use mambavf::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pgm(w: usize, h: usize, maxval: usize, bytes: &[u8]) -> Vec<u8> {
    let mut v = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    v.extend_from_slice(bytes);
    v
}

#[test]
fn vtf_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.vtf");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t: Tensor<f32> = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1e3..1e3));
    write_vtf(&path, &t).unwrap();
    let back: Tensor<f32> = read_vtf(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 4 + 1 + 1 + 3 * 4 + 24 * 4);
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(vtf::from_bytes::<f32>(&bad), Err(Error::Format(_))));

    let err = vtf::from_bytes::<f32>(&bytes[..bytes.len() - 1]).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format(_)));
    assert!(msg.contains("96") && msg.contains("95"), "{msg}");

    let mut long = bytes.clone();
    long.push(0);
    assert!(vtf::from_bytes::<f32>(&long).is_err());
}

#[test]
fn pgm_scaling_matches_hand_values() {
    let t: Tensor<f64> = pnm::decode(&pgm(2, 2, 255, &[0, 128, 255, 64])).unwrap();
    assert_eq!(t.shape(), &[1, 2, 2]);
    let expect = [0.0, 0.50196, 1.0, 0.25098];
    for (a, b) in t.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    let one: Tensor<f64> = pnm::decode(&pgm(1, 1, 255, &[255])).unwrap();
    assert_eq!(one.data(), &[1.0]);
    let commented = b"P5\n# a comment\n2 1\n255\n\x00\xff".to_vec();
    assert_eq!(pnm::decode::<f64>(&commented).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn pgm_rejections() {
    assert!(matches!(pnm::decode::<f32>(&pgm(2, 2, 65535, &[0; 8])), Err(Error::Format(_))));
    assert!(matches!(pnm::decode::<f32>(&pgm(2, 2, 255, &[0; 3])), Err(Error::Format(_))));
    assert!(matches!(pnm::decode::<f32>(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
}

#[test]
fn frame_dirs() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..2 {
        fs::write(dir.path().join(format!("f{i}.pgm")), pgm(4, 4, 255, &[0; 16])).unwrap();
    }
    let v: Tensor<f32> = read_frame_dir(dir.path()).unwrap();
    assert_eq!(v.shape(), &[2, 1, 4, 4]);
    assert_eq!(v.max_abs(), 0.0);

    fs::write(dir.path().join("f2.pgm"), pgm(2, 2, 255, &[0; 4])).unwrap();
    assert!(matches!(read_frame_dir::<f32>(dir.path()), Err(Error::Format(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(read_frame_dir::<f32>(empty.path()).is_err());
}

#[test]
fn frame_dir_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v: Tensor<f32> = Tensor::from_fn(&[3, 3, 2, 5], |i| ((i * 37) % 256) as f32 / 255.0);
    let paths = write_frame_dir(dir.path(), &v).unwrap();
    assert_eq!(paths.len(), 3);
    assert!(paths[0].ends_with("frame_00000.ppm"));
    let back: Tensor<f32> = read_frame_dir(dir.path()).unwrap();
    assert_eq!(back, v);
}

#[test]
fn config_canonical_echo() {
    let text = "# run\nembed_dim=16\nscan_mode=spatial4\ntask=mef\nsteps = 50\nalpha2=0.25\n\n";
    let c = RunConfig::parse(text).unwrap();
    assert_eq!(c.model.embed_dim, 16);
    assert_eq!(c.model.scan_mode, ScanMode::Spatial4);
    assert_eq!(c.task, TaskKind::Mef);
    assert_eq!(c.steps, 50);
    assert_eq!(c.weights().alpha1, 10.0);
    assert_eq!(c.weights().alpha2, 0.25);
    let canon = c.to_text();
    let again = RunConfig::parse(&canon).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.to_text(), canon);
    assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
}

#[test]
fn config_rejections() {
    for bad in ["colour=red", "embed_dim=8\nembed_dim=8", "steps=-1", "lr=abc", "no equals sign", "task=xyz", "window=4"] {
        let err = RunConfig::parse(bad).unwrap_err();
        assert!(!matches!(err, Error::Internal(_)), "{bad}");
    }
    let msg = RunConfig::parse("seed=1\ncolour=red").unwrap_err().to_string();
    assert!(msg.contains("colour") && msg.contains("line 2"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vtf_bytes_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tensor<f32> = Tensor::from_fn(&shape, |_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff));
        let b = vtf::to_bytes(&t).unwrap();
        let back: Tensor<f32> = vtf::from_bytes(&b).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(vtf::to_bytes(&back).unwrap(), b);
    }

    #[test]
    fn pgm_encode_decode(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        let t: Tensor<f64> = pnm::decode(&pgm(w, h, 255, &bytes)).unwrap();
        prop_assert_eq!(pnm::encode(&t).unwrap(), pgm(w, h, 255, &bytes));
    }

    #[test]
    fn config_echo_is_stable(k in 1usize..16, depth in 0usize..5, seed in any::<u64>(), steps in 1usize..10_000, mode in 0usize..3) {
        let mode = ["stb8", "spatial4", "temporal1"][mode];
        let text = format!("embed_dim={}\ndepth={depth}\nseed={seed}\nsteps={steps}\nscan_mode={mode}\n", 4 * k);
        let c = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
