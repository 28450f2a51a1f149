use ognet::layers::GraphKeys;
use ognet::model::{OgNet, OgNetConfig, Variant};
use ognet::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
    Tensor::from_fn(&[n, m, 6], |i| {
        if i % 6 < 3 {
            rng.random_range(-1.0..1.0)
        } else {
            rng.random_range(0.0..1.0)
        }
    })
}

fn small_config(k: usize) -> OgNetConfig {
    let mut cfg = OgNetConfig::new(Variant::OgnSmall, k).scaled_points(256);
    cfg.k = 8;
    cfg
}

#[test]
fn reference_shapes_at_4096_points() {
    let net = OgNet::build(Variant::Ogn, 10, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_batch(&mut rng, 2, 4096);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &input, Mode::Train, &mut rng).unwrap();
    let points: Vec<usize> = std::iter::once(4096).chain(out.trace.iter().map(|t| t.points_out)).collect();
    let channels: Vec<usize> = std::iter::once(3).chain(out.trace.iter().map(|t| t.channels_out)).collect();
    assert_eq!(points, [4096, 768, 384, 192, 96]);
    assert_eq!(channels, [3, 64, 128, 256, 512]);
    assert_eq!(tape.shape(out.pooled), &[2, 1024]);
    assert_eq!(tape.shape(out.embedding), &[2, 512]);
    assert_eq!(tape.shape(out.logits), &[2, 10]);
}

#[test]
fn deep_variant_alternates_modules() {
    let net = OgNet::build(Variant::OgnDeep, 4, 1).unwrap();
    let downs: Vec<bool> = net.modules().iter().map(|m| m.config.target.is_some()).collect();
    assert_eq!(downs, [true, true, false, true, false, true, false]);
    let shortcuts: Vec<bool> = net.modules().iter().map(|m| m.config.shortcut).collect();
    assert_eq!(shortcuts, [false, false, true, false, true, false, true]);
    let keys: Vec<GraphKeys> = net.modules().iter().map(|m| m.config.keys).collect();
    assert_eq!(keys[6], GraphKeys::AppearancePosition);
    assert!(keys[..6].iter().all(|&k| k == GraphKeys::Position));
}

#[test]
fn head_parameter_count() {
    let net = OgNet::build(Variant::Ogn, 751, 0).unwrap();
    let head: usize = net
        .params()
        .ids()
        .filter(|&id| net.params().name(id).starts_with("head."))
        .map(|id| net.params().get(id).numel())
        .sum();
    // FC weights and bias plus BN scale and shift; the 1,024 running
    // statistics are buffers, not parameters.
    assert_eq!(head, 525_824);
    let stats = net.params().running_stats().iter().find(|r| r.name == "head.bn").unwrap();
    assert_eq!(stats.mean.len() + stats.var.len(), 1_024);
    assert_eq!(net.count_parameters() - net.count_embedding_parameters(), 512 * 751 + 751);
}

#[test]
fn parameter_counts_near_reference() {
    for (variant, reference) in [
        (Variant::Ogn, 1.95e6),
        (Variant::OgnSmall, 1.20e6),
        (Variant::OgnDeep, 2.47e6),
    ] {
        let net = OgNet::build(variant, 751, 0).unwrap();
        let ratio = net.count_embedding_parameters() as f64 / reference;
        assert!((0.8..=1.2).contains(&ratio), "{variant}: {ratio}");
    }
}

#[test]
fn logits_are_permutation_invariant() {
    let net = OgNet::from_config(small_config(5), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_batch(&mut rng, 2, 256);
    let mut perm: Vec<usize> = (0..256).collect();
    for i in (1..256).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut permuted = input.clone();
    for s in 0..2 {
        for (new, &old) in perm.iter().enumerate() {
            let src = (s * 256 + old) * 6;
            let dst = (s * 256 + new) * 6;
            permuted.data_mut()[dst..dst + 6].copy_from_slice(&input.data()[src..src + 6]);
        }
    }
    let a = net.predict(&input).unwrap();
    let b = net.predict(&permuted).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn eval_is_deterministic_and_appearance_is_live() {
    let net = OgNet::from_config(small_config(5), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random_batch(&mut rng, 2, 256);
    let a = net.extract_embedding(&input).unwrap();
    let b = net.extract_embedding(&input).unwrap();
    assert_eq!(a.shape(), &[2, 512]);
    assert_eq!(a.data(), b.data());
    let mut recolored = input.clone();
    for row in recolored.data_mut().chunks_exact_mut(6) {
        row[3] = 1.0 - row[3];
    }
    let c = net.extract_embedding(&recolored).unwrap();
    assert!(a.max_abs_diff(&c) > 1e-6);
}

#[test]
fn no_rgb_ignores_colors() {
    let mut cfg = small_config(5);
    cfg.no_rgb = true;
    let net = OgNet::from_config(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_batch(&mut rng, 2, 256);
    let mut recolored = input.clone();
    for row in recolored.data_mut().chunks_exact_mut(6) {
        row[4] = 0.5;
    }
    let a = net.extract_embedding(&input).unwrap();
    let b = net.extract_embedding(&recolored).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn translation_leaves_logits_unchanged() {
    let net = OgNet::from_config(small_config(5), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random_batch(&mut rng, 2, 256);
    let mut moved = input.clone();
    for row in moved.data_mut().chunks_exact_mut(6) {
        row[0] += 3.0;
        row[1] -= 1.5;
        row[2] += 0.25;
    }
    let a = net.predict(&input).unwrap();
    let b = net.predict(&moved).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn too_few_points_is_a_shape_error() {
    let net = OgNet::from_config(small_config(5), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = random_batch(&mut rng, 2, 20);
    assert_eq!(net.predict(&input).unwrap_err().kind(), "shape");
}

#[test]
fn config_rejects_bad_inputs() {
    assert!(OgNet::build(Variant::Ogn, 1, 0).is_err());
    assert!("ogn_huge".parse::<Variant>().is_err());
    let mut cfg = small_config(4);
    cfg.point_schedule = vec![48, 48, 12, 6];
    assert!(OgNet::from_config(cfg, 0).is_err());
    let mut cfg = small_config(4);
    cfg.dropout_p = 1.0;
    assert!(OgNet::from_config(cfg, 0).is_err());
}

#[test]
fn config_text_round_trip() {
    let mut cfg = small_config(7);
    cfg.use_se = false;
    cfg.last_graph = GraphKeys::Position;
    let back = OgNetConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let net = OgNet::from_config(small_config(4), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random_batch(&mut rng, 2, 256);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ogck");
    net.save(&path).unwrap();
    let back = OgNet::load(&path).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(net.predict(&input).unwrap().data(), back.predict(&input).unwrap().data());
}
