use ktd_core::nets::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// A random valid layer stack over a 1x8x8 input.
fn layer_stack() -> impl Strategy<Value = Vec<LayerSpec>> {
    prop::collection::vec(0usize..4, 1..5).prop_map(|kinds| {
        let mut layers = Vec::new();
        let mut shape = Shape::new(1, 8, 8);
        for k in kinds {
            let layer = match k {
                0 => LayerSpec::conv3x3(shape.channels, 1 + layers.len() % 3),
                1 if shape.height >= 2 => LayerSpec::max_pool(2),
                2 => LayerSpec::relu(),
                _ => LayerSpec::Dropout { rate: 0.3 },
            };
            shape = layer.output_shape(shape).unwrap();
            layers.push(layer);
        }
        layers.push(LayerSpec::Flatten);
        let flat = shape.len();
        layers.push(LayerSpec::fc(flat, 5));
        layers
    })
}

proptest! {
    #[test]
    fn macs_and_params_add_over_concatenation(a in layer_stack(), b_width in 1usize..6) {
        let input = Shape::new(1, 8, 8);
        let mid = a.iter().try_fold(input, |s, l| l.output_shape(s)).unwrap();
        let b = vec![LayerSpec::relu(), LayerSpec::fc(mid.len(), b_width)];
        let joined: Vec<LayerSpec> = a.iter().chain(&b).cloned().collect();
        prop_assert_eq!(
            count_layer_macs(&joined, input).unwrap(),
            count_layer_macs(&a, input).unwrap() + count_layer_macs(&b, mid).unwrap()
        );
        let params = |ls: &[LayerSpec]| ls.iter().map(LayerSpec::param_count).sum::<usize>();
        prop_assert_eq!(params(&joined), params(&a) + params(&b));
    }

    #[test]
    fn bundles_round_trip_bitwise(seed in any::<u64>()) {
        let spec = NetworkSpec::conv_blocks("rt", 8, &[2, 3], 4, &classes(3)).unwrap();
        let bundle = init_weights(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ktdw");
        bundle.save(&path).unwrap();
        let back = WeightBundle::load(&path, &spec).unwrap();
        prop_assert!(back.bit_eq(&bundle));
    }
}

#[test]
fn init_is_seeded() {
    let spec = NetworkSpec::conv_blocks("s", 8, &[2], 4, &classes(2)).unwrap();
    assert!(init_weights(&spec, 3).unwrap().bit_eq(&init_weights(&spec, 3).unwrap()));
    assert!(!init_weights(&spec, 3).unwrap().bit_eq(&init_weights(&spec, 4).unwrap()));
}

#[test]
fn dropout_masks_at_the_configured_rate() {
    let n = 20_000;
    for rate in [0.1, 0.5, 0.8] {
        let spec = NetworkSpec {
            name: "drop".into(),
            input: Shape::flat(n),
            backbone: vec![LayerSpec::Dropout { rate }],
            shared_head: None,
            shared_activation: ActivationKind::Identity,
            class_heads: vec![HeadSpec { name: "a".into(), layer: LayerSpec::fc(n, 1) }],
            head_mode: HeadMode::Linear,
        };
        let bundle = init_weights(&spec, 0).unwrap();
        let net = Network::new(&spec, &bundle).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = net.forward(&vec![1.0; n], Mode::Train { rng: &mut rng, feature_dropout: 0.0 }).unwrap();
        let dropped = out.feature.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        let sigma = (rate * (1.0 - rate) / n as f64).sqrt();
        assert!((dropped - rate).abs() <= 5.0 * sigma, "rate {rate}: dropped {dropped}");
        // inverted dropout keeps the expectation
        let kept = out.feature.iter().find(|v| **v != 0.0).unwrap();
        assert!((kept - 1.0 / (1.0 - rate)).abs() <= 1e-12);
        let eval = net.forward(&vec![1.0; n], Mode::Eval).unwrap();
        assert!(eval.feature.iter().all(|v| *v == 1.0));
    }
}

#[test]
fn loading_against_a_different_spec_fails() {
    let a = NetworkSpec::conv_blocks("a", 8, &[2], 4, &classes(2)).unwrap();
    let b = NetworkSpec::conv_blocks("b", 8, &[3], 4, &classes(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ktdw");
    init_weights(&a, 0).unwrap().save(&path).unwrap();
    assert!(WeightBundle::load(&path, &b).is_err());
    std::fs::write(&path, b"not a bundle").unwrap();
    assert!(WeightBundle::load_unchecked(&path).is_err());
}

#[test]
fn transfer_copies_trunk_and_matching_heads_only() {
    let ap = NetworkSpec::conv_blocks("ap", 8, &[2], 4, &["pneumonia".to_string(), "edema".to_string()]).unwrap();
    let rf = ap.with_heads("rf", &["covid".to_string(), "normal".to_string(), "pneumonia".to_string()]).unwrap();
    let src = init_weights(&ap, 1).unwrap();
    let mapping = default_head_mapping(&rf.head_names());
    let out = transfer_weights(&src, &ap, &rf, &mapping, true, 2).unwrap();
    for (name, arr) in &src.entries {
        if !name.starts_with("head.") {
            assert!(out.entries[name].bit_eq(arr), "{name}");
        }
    }
    for (name, arr) in &out.entries {
        if name.starts_with("head.pneumonia") {
            assert!(arr.bit_eq(&src.entries[name]));
        }
    }
}
