use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_autodiff::{AdamConfig, AdamState, GradCheckOptions, Tape, Tensor};
use relight_core::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use relight_core::prnet::*;

fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// A network whose light head is the identity on an 8-channel bottleneck,
/// predicting a 1×2 light: channels 0..6 are the light, 6..8 the logits.
fn identity_head_config(input_size: usize) -> PrNetConfig {
    PrNetConfig {
        input_size,
        widths: vec![8],
        strides: vec![2],
        light_height: 1,
        light_width: 2,
        groups: 2,
        kernel: 3,
        light_features: 4,
        confidence: ConfidenceMode::PerPixel,
    }
}

fn identity_head_params(config: &PrNetConfig) -> PrNetParams {
    let p = init_params(config, 0).unwrap();
    let names = p.names().to_vec();
    let tensors = names
        .iter()
        .zip(p.tensors())
        .map(|(n, t)| {
            if n == "light_head.w" {
                Tensor::from_fn(&[1, 1, 8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 })
            } else {
                t.clone()
            }
        })
        .collect();
    PrNetParams::new(config, names, tensors).unwrap()
}

/// Pooled light for a bottleneck of `b×b` locations with the given channels.
fn pool(config: &PrNetConfig, bottleneck: Tensor<f64>) -> Vec<f64> {
    let params = identity_head_params(config);
    let mut tape = Tape::<f64>::new();
    let net = Bound::new(&mut tape, &params, false);
    let x = tape.constant(bottleneck);
    let (light, conf) = predict_light(&mut tape, &net, config, x).unwrap();
    assert!(tape.value(conf).data().iter().all(|&c| c > 0.0));
    tape.value(light).data().to_vec()
}

fn location(lights: &[[f64; 6]], logits: &[[f64; 2]]) -> Tensor<f64> {
    let data = lights.iter().zip(logits).flat_map(|(l, g)| l.iter().chain(g).copied().collect::<Vec<_>>()).collect();
    let b = (lights.len() as f64).sqrt() as usize;
    Tensor::new(vec![b, b, 8], data).unwrap()
}

fn random_lights(n: usize, seed: u64) -> Vec<[f64; 6]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect()
}

#[test]
fn init_is_deterministic_per_seed() {
    let c = PrNetConfig::toy();
    assert_eq!(init_params(&c, 3).unwrap(), init_params(&c, 3).unwrap());
    assert_ne!(init_params(&c, 3).unwrap(), init_params(&c, 4).unwrap());
}

#[test]
fn kernel_std_matches_fan_in() {
    let c = PrNetConfig::toy();
    let p = init_params(&c, 1).unwrap();
    for spec in param_layout(&c).unwrap() {
        let t = p.get(&spec.name).unwrap();
        match spec.kind {
            ParamKind::Kernel { fan_in } if t.len() >= 10_000 => {
                let draws = &t.data()[..10_000];
                let mean = draws.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
                let sd = (draws.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 1e4).sqrt();
                let expected = (2.0 / fan_in as f64).sqrt();
                assert!((sd / expected - 1.0).abs() < 0.1, "{}: {sd} vs {expected}", spec.name);
            }
            ParamKind::Bias | ParamKind::Beta => assert!(t.data().iter().all(|&v| v == 0.0), "{}", spec.name),
            ParamKind::Gamma => assert!(t.data().iter().all(|&v| v == 1.0)),
            _ => {}
        }
    }
}

#[test]
fn equal_confidences_average_locations() {
    let c = identity_head_config(4);
    let lights = random_lights(4, 1);
    let out = pool(&c, location(&lights, &[[0.3, -1.0]; 4]));
    for k in 0..6 {
        let mean = lights.iter().map(|l| l[k]).sum::<f64>() / 4.0;
        assert!((out[k] - mean).abs() < 1e-12);
    }
}

#[test]
fn dominant_confidence_selects_its_location() {
    let c = identity_head_config(4);
    let lights = random_lights(4, 2);
    let mut logits = [[-20.0; 2]; 4];
    logits[2] = [20.0, 20.0];
    let out = pool(&c, location(&lights, &logits));
    // Weighted-average oracle with softplus(+-20).
    let (hi, lo) = (softplus(20.0), softplus(-20.0));
    for k in 0..6 {
        let oracle = (hi * lights[2][k] + lo * (lights[0][k] + lights[1][k] + lights[3][k])) / (hi + 3.0 * lo);
        assert!((out[k] - oracle).abs() < 1e-12);
        assert!((out[k] - lights[2][k]).abs() < 1e-6);
    }
}

#[test]
fn single_location_passes_through() {
    let c = identity_head_config(2);
    let lights = random_lights(1, 3);
    let out = pool(&c, location(&lights, &[[1.7, -4.0]]));
    assert_eq!(out, lights[0].to_vec());
}

#[test]
fn output_shapes_and_ranges() {
    for c in [PrNetConfig::tiny(), PrNetConfig::toy()] {
        let p = init_params(&c, 5).unwrap();
        let d = c.input_size;
        let img = random(&[d, d, 3], 1, 0.0, 1.0);
        let light = random(&[c.light_height, c.light_width, 3], 2, 0.0, 2.0);
        let out = forward(&p, &c, &img, &light).unwrap();
        assert_eq!(out.image.shape(), &[d, d, 3]);
        assert_eq!(out.light.shape(), &[c.light_height, c.light_width, 3]);
        let b = c.bottleneck_size();
        assert_eq!(out.confidence.shape(), &[b, b, c.light_pixels()]);
        assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.confidence.data().iter().all(|&v| v > 0.0));
        assert_eq!(out, forward(&p, &c, &img, &light).unwrap());
    }
}

#[test]
fn scalar_confidence_mode_runs() {
    let c = PrNetConfig { confidence: ConfidenceMode::Scalar, ..PrNetConfig::tiny() };
    let p = init_params(&c, 5).unwrap();
    let out = forward(&p, &c, &random(&[16, 16, 3], 1, 0.0, 1.0), &random(&[4, 8, 3], 2, 0.0, 1.0)).unwrap();
    assert_eq!(out.confidence.shape(), &[4, 4, 1]);
}

#[test]
fn target_light_changes_the_output() {
    let c = PrNetConfig::toy();
    let p = init_params(&c, 6).unwrap();
    let img = random(&[64, 64, 3], 1, 0.0, 1.0);
    let a = forward(&p, &c, &img, &random(&[8, 16, 3], 2, 0.0, 2.0)).unwrap();
    let b = forward(&p, &c, &img, &random(&[8, 16, 3], 3, 0.0, 2.0)).unwrap();
    assert!(a.image.max_abs_diff(&b.image) > 0.0);
    assert_eq!(a.light, b.light);
}

#[test]
fn shape_mismatches_are_rejected() {
    let c = PrNetConfig::tiny();
    let p = init_params(&c, 0).unwrap();
    assert!(forward(&p, &c, &Tensor::zeros(&[8, 8, 3]), &Tensor::zeros(&[4, 8, 3])).is_err());
    assert!(forward(&p, &c, &Tensor::zeros(&[16, 16, 3]), &Tensor::zeros(&[8, 16, 3])).is_err());
    assert!(PrNetParams::new(&PrNetConfig::toy(), p.names().to_vec(), p.tensors().to_vec()).is_err());
}

#[test]
fn full_network_gradients_match_finite_differences() {
    // A 1e-4 step can straddle a PReLU kink; 1e-6 keeps the stencil on one side.
    let opts = GradCheckOptions { max_entries: Some(64), step: 1e-6, ..GradCheckOptions::default() };
    for seed in [7, 8] {
        let report = gradient_check(&PrNetConfig::tiny(), seed, &opts).unwrap();
        assert!(report.passed, "seed {seed}: {report}");
    }
}

fn tmp_checkpoint(ckpt: &Checkpoint) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), ckpt).unwrap();
    dir
}

#[test]
fn save_load_forward_is_bit_identical() {
    let c = PrNetConfig::toy();
    let mut params = init_params(&c, 11).unwrap();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = AdamState::new(AdamConfig::default(), shapes.iter().map(Vec::as_slice));
    let grads: Vec<Tensor<f32>> = shapes.iter().enumerate().map(|(i, s)| random(s, i as u64, -1.0, 1.0)).collect();
    adam.step(params.tensors_mut(), &grads).unwrap();

    let img = random(&[64, 64, 3], 1, 0.0, 1.0);
    let light = random(&[8, 16, 3], 2, 0.0, 1.0);
    let before = forward(&params, &c, &img, &light).unwrap();
    let ckpt = Checkpoint { config: c.clone(), params, adam: Some(adam), step: 1 };
    let dir = tmp_checkpoint(&ckpt);
    let loaded = load_checkpoint(dir.path(), Some(&c)).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(forward(&loaded.params, &c, &img, &light).unwrap(), before);

    let bare = Checkpoint { adam: None, ..ckpt };
    let dir = tmp_checkpoint(&bare);
    assert_eq!(load_checkpoint(dir.path(), None).unwrap(), bare);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let c = PrNetConfig::tiny();
    let ckpt = Checkpoint { config: c.clone(), params: init_params(&c, 0).unwrap(), adam: None, step: 0 };
    let blob = |d: &tempfile::TempDir| d.path().join("tensors.bin");

    let dir = tmp_checkpoint(&ckpt);
    let mut bytes = std::fs::read(blob(&dir)).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(blob(&dir), &bytes).unwrap();
    assert!(load_checkpoint(dir.path(), None).unwrap_err().to_string().contains("checksum"));

    let dir = tmp_checkpoint(&ckpt);
    let bytes = std::fs::read(blob(&dir)).unwrap();
    std::fs::write(blob(&dir), &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(dir.path(), None).is_err());

    let dir = tmp_checkpoint(&ckpt);
    assert!(load_checkpoint(dir.path(), Some(&PrNetConfig::toy())).is_err());

    let dir = tmp_checkpoint(&ckpt);
    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&manifest, text).unwrap();
    assert!(load_checkpoint(dir.path(), None).unwrap_err().to_string().contains("version"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn confidence_pool_is_homogeneous(seed in 0u64..1000, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let light = Tensor::from_fn(&[2, 3, 12], |_| rng.random_range(-1.0..1.0));
        let conf = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(0.01..2.0));
        // Scale every location's confidence for light pixel 1 only.
        let scaled = Tensor::from_fn(&[2, 3, 4], |i| conf.data()[i] * if i % 4 == 1 { k } else { 1.0 });
        let run = |cf: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let (l, c) = (tape.constant(light.clone()), tape.constant(cf));
            let y = tape.confidence_pool(l, c, 2, 2).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(conf.clone()), run(scaled));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
