use edgeseg::edge::LEVEL_FACTORS;
use edgeseg::network::{load_encoder_checkpoint, Checkpoint, Mode, Model, NetworkConfig, ENCODER_PREFIX};
use edgeseg::phantom::{make_ellipsoid_phantom, PhantomSpec};
use edgeseg::{Shape5, Tensor};
use edgeseg_tensor::Graph;
use proptest::prelude::*;

fn tiny() -> NetworkConfig {
    NetworkConfig { width_multiplier: 0.125, blocks: [1, 1, 1, 1] }
}

#[test]
fn taps_at_reference_width() {
    // channel counts depend only on the width; one block per stage keeps it fast
    let cfg = NetworkConfig { width_multiplier: 1.0, blocks: [1, 1, 1, 1] };
    let model = Model::<f32>::new(&cfg, Mode::Full, 0).unwrap();
    let mut g = Graph::new(model.params());
    let x = g.input(Tensor::zeros(Shape5::new(1, 1, 96, 96, 32)));
    let taps = model.encoder().forward(&mut g, x);
    assert_eq!(g.shape(taps.t0), Shape5::new(1, 64, 48, 48, 32));
    assert_eq!(g.shape(taps.e1), Shape5::new(1, 256, 24, 24, 16));
    assert_eq!(g.shape(taps.e4), Shape5::new(1, 2048, 12, 12, 8));
}

#[test]
fn simple_decoder_is_small_next_to_the_encoder() {
    let model = Model::<f32>::new(&NetworkConfig::default(), Mode::Pretrain, 0).unwrap();
    let encoder = model.params().numel_with_prefix(ENCODER_PREFIX);
    let decoder = model.params().numel() - encoder;
    assert!((decoder as f64) < 0.05 * encoder as f64, "decoder {decoder} vs encoder {encoder}");
}

fn shifted_phantoms() -> (Tensor<f64>, Tensor<f64>) {
    let dims = [64, 64, 32];
    let mut spec = PhantomSpec::centered(dims, 3);
    spec.radii = [8.0, 8.0, 4.0];
    // uniform background, so moving the array is moving the object
    spec.noise_sigma = 0.0;
    let (image, _) = make_ellipsoid_phantom::<f64>(&spec).unwrap();
    let x = image.to_tensor();
    let bg = spec.background_intensity;
    let shifted = Tensor::from_fn(x.shape(), |i| {
        let (px, py, pz) = (i % 64, (i / 64) % 64, i / 4096);
        if px < 8 || py < 8 || pz < 4 {
            bg
        } else {
            x.data()[(px - 8) + 64 * ((py - 8) + 64 * (pz - 4))]
        }
    });
    (x, shifted)
}

#[test]
fn shifting_by_the_encoder_stride_shifts_the_prediction() {
    let (x, shifted) = shifted_phantoms();
    for seed in [1, 2] {
        let m = Model::<f64>::new(&tiny(), Mode::Full, seed).unwrap();
        let a = m.forward(&x).unwrap().prob;
        let b = m.forward(&shifted).unwrap().prob;
        let mut worst: f64 = 0.0;
        // a 16/16/8-voxel border is left out as padding-affected
        for z in 8..20 {
            for y in 16..40 {
                for xx in 16..40 {
                    let va = a.data()[xx + 64 * (y + 64 * z)];
                    let vb = b.data()[(xx + 8) + 64 * ((y + 8) + 64 * (z + 4))];
                    worst = worst.max((va - vb).abs());
                }
            }
        }
        assert!(worst < 1e-3, "seed {seed}: interior differs by {worst}");
    }
}

#[test]
fn encoder_round_trip_loads_everything_and_leaves_the_decoder_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("pre.ckpt");
    let pre = Model::<f64>::new(&tiny(), Mode::Pretrain, 4).unwrap();
    Checkpoint::from_model(&pre, 10).save(&path).unwrap();

    let mut full = Model::<f64>::new(&tiny(), Mode::Full, 5).unwrap();
    let before: Vec<(String, Tensor<f64>)> =
        full.params().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    let report = load_encoder_checkpoint(&mut full, &path, true).unwrap();
    let n_encoder = before.iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)).count();
    assert_eq!(report.loaded, n_encoder);
    assert!(report.skipped.is_empty() && report.missing.is_empty());
    for (name, old) in &before {
        let id = full.params().id(name).unwrap();
        let now = full.params().get(id);
        if name.starts_with(ENCODER_PREFIX) {
            assert_eq!(now, pre.params().get(pre.params().id(name).unwrap()));
        } else {
            assert_eq!(now, old, "{name} changed");
        }
    }
}

#[test]
fn renamed_tensor_is_skipped_or_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("pre.ckpt");
    let pre = Model::<f64>::new(&tiny(), Mode::Pretrain, 4).unwrap();
    let mut ck = Checkpoint::from_model(&pre, 0);
    assert!(ck.rename("encoder.stem.w", "encoder.stem_renamed.w"));
    ck.save(&path).unwrap();

    let mut strict = Model::<f64>::new(&tiny(), Mode::Full, 5).unwrap();
    let snapshot: Vec<Tensor<f64>> = strict.params().iter().map(|(_, p)| p.value.clone()).collect();
    let err = load_encoder_checkpoint(&mut strict, &path, true).unwrap_err();
    assert!(err.to_string().contains("encoder.stem_renamed.w"), "{err}");
    let after: Vec<Tensor<f64>> = strict.params().iter().map(|(_, p)| p.value.clone()).collect();
    assert!(snapshot == after, "failed strict load modified the model");

    let mut lenient = Model::<f64>::new(&tiny(), Mode::Full, 5).unwrap();
    let report = load_encoder_checkpoint(&mut lenient, &path, false).unwrap();
    assert_eq!(report.skipped, vec!["encoder.stem_renamed.w".to_string()]);
    assert_eq!(report.missing, vec!["encoder.stem.w".to_string()]);
    let n_encoder = lenient.params().iter().filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX)).count();
    assert_eq!(report.loaded, n_encoder - 1);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let mut m = Model::<f64>::new(&tiny(), Mode::Full, 0).unwrap();
    let err = load_encoder_checkpoint(&mut m, &path, false).unwrap_err();
    assert!(matches!(err.category(), "format" | "truncation"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn output_shapes_follow_the_input(kx in 1usize..4, ky in 1usize..4, kz in 1usize..4, seed in 0u64..100) {
        let shape = Shape5::new(1, 1, 8 * kx, 8 * ky, 4 * kz);
        let m = Model::<f32>::new(&NetworkConfig { width_multiplier: 0.0625, blocks: [1, 1, 1, 1] }, Mode::Full, seed).unwrap();
        let x = Tensor::from_fn(shape, |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 500.0 - 1.0);
        let out = m.forward(&x).unwrap();
        prop_assert_eq!(out.prob.shape(), shape);
        let edges = out.edges.unwrap();
        for (e, f) in edges.iter().zip(LEVEL_FACTORS) {
            prop_assert_eq!(e.shape(), Shape5::new(1, 1, shape.x / f[0], shape.y / f[1], shape.z / f[2]));
            prop_assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert!(out.prob.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (p, es) = Model::<f32>::output_shapes(shape).unwrap();
        prop_assert_eq!(p, shape);
        prop_assert_eq!(es, [edges[0].shape(), edges[1].shape(), edges[2].shape()]);
    }
}
