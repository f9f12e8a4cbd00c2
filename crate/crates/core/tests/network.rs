use eegtta_core::losses::softmax;
use eegtta_core::nn::checkpoint;
use eegtta_core::nn::{
    BnMode, Dims, EegNetConfig, GradScope, Layer, Network, OptKind, OptState, ParamGrads, Pass,
    Tensor4,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> EegNetConfig {
    EegNetConfig {
        channels: 4,
        samples: 32,
        temporal_filters: 2,
        depth: 2,
        pointwise_filters: 4,
        temporal_kernel: 8,
        separable_kernel: 4,
        pool1: 2,
        pool2: 4,
        dropout: 0.25,
        classes: 2,
    }
}

/// Random weights plus non-trivial BN affine parameters and statistics.
fn small_net(seed: u64) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::eegnet(&small_cfg(), &mut rng).unwrap();
    for bn in net.bn_layers_mut() {
        for c in 0..bn.channels() {
            bn.gamma[c] = rng.random_range(0.5..1.5);
            bn.beta[c] = rng.random_range(-0.3..0.3);
            bn.running_mean[c] = rng.random_range(-0.2..0.2);
            bn.running_var[c] = rng.random_range(0.5..2.0);
        }
    }
    net.classifier_mut().bias = vec![0.1, -0.2];
    net
}

fn input(seed: u64, n: usize, cfg: &EegNetConfig) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims::new(n, 1, cfg.channels, cfg.samples);
    Tensor4::from_vec(d, (0..d.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_logits(net: &Network<f64>, x: &Tensor4<f64>, pass: Pass, c: &Array2<f64>) -> f64 {
    let mut n = net.clone();
    let f = n.forward(x, pass, None).unwrap();
    (&f.logits * c).sum()
}

fn param_mut(net: &mut Network<f64>, layer: usize, p: usize) -> &mut Vec<f64> {
    net.layers_mut()[layer].params_mut().into_iter().nth(p).unwrap()
}

fn max_rel_error(net: &Network<f64>, x: &Tensor4<f64>, pass: Pass, scope: GradScope) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c = Array2::from_shape_fn((x.dims().n, 2), |_| rng.random_range(-1.0..1.0));
    let mut probe = net.clone();
    let f = probe.forward(x, pass, None).unwrap();
    let grads = net.backward(&f.cache, &c, scope).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (li, layer_grads) in grads.layers.iter().enumerate() {
        for (pi, g) in layer_grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = net.clone();
                param_mut(&mut plus, li, pi)[j] += h;
                let mut minus = net.clone();
                param_mut(&mut minus, li, pi)[j] -= h;
                let numeric = (weighted_logits(&plus, x, pass, &c) - weighted_logits(&minus, x, pass, &c)) / (2.0 * h);
                let err = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
    }
    worst
}

#[test]
fn all_param_gradients_match_finite_differences_in_every_regime() {
    let cfg = small_cfg();
    let x = input(1, 3, &cfg);
    for (mode, pass) in [
        (BnMode::FixedSource, Pass::Train),
        (BnMode::FixedSource, Pass::Adapt),
        (BnMode::FixedSource, Pass::Eval),
        (BnMode::TrackRunning, Pass::Adapt),
        (BnMode::BatchOnly, Pass::Adapt),
    ] {
        let mut net = small_net(2);
        net.set_bn_mode(mode);
        let err = max_rel_error(&net, &x, pass, GradScope::AllParams);
        assert!(err < 1e-5, "{mode:?}/{pass:?}: relative error {err}");
    }
}

#[test]
fn bn_affine_scope_matches_full_scope_on_bn_layers() {
    let cfg = small_cfg();
    let x = input(3, 2, &cfg);
    let mut net = small_net(4);
    net.set_bn_mode(BnMode::BatchOnly);
    let c = Array2::from_shape_vec((2, 2), vec![0.3, -1.0, 0.7, 0.2]).unwrap();
    let f = net.clone().forward(&x, Pass::Adapt, None).unwrap();
    let full = net.backward(&f.cache, &c, GradScope::AllParams).unwrap();
    let bn_only = net.backward(&f.cache, &c, GradScope::BnAffineOnly).unwrap();
    assert_eq!(bn_only.buffer_count(), 6);
    for (li, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::BatchNorm(_)) {
            assert_eq!(full.layers[li], bn_only.layers[li]);
        } else {
            assert!(bn_only.layers[li].is_empty());
        }
    }
    assert!(max_rel_error(&net, &x, Pass::Adapt, GradScope::BnAffineOnly) < 1e-5);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let cfg = small_cfg();
    let net = small_net(5);
    let f = net.forward_eval(&input(6, 2, &cfg)).unwrap();
    let g = net.backward(&f.cache, &Array2::zeros((2, 2)), GradScope::AllParams).unwrap();
    assert!(g.values().all(|v| v == 0.0));
}

#[test]
fn prefix_forward_matches_full_forward() {
    let cfg = small_cfg();
    let net = small_net(7);
    let x = input(8, 3, &cfg);
    let k = net.frozen_prefix_len();
    assert_eq!(k, 1);
    let full = net.forward_eval(&x).unwrap();
    let part = net.forward_eval_from(k, &net.forward_prefix(&x, k).unwrap()).unwrap();
    assert_eq!(full.logits, part.logits);
    assert_eq!(full.features, part.features);
    // A cache that starts above the lowest trainable layer cannot serve AllParams.
    assert!(net.backward(&part.cache, &Array2::zeros((3, 2)), GradScope::AllParams).is_err());
    assert!(net.backward(&part.cache, &Array2::zeros((3, 2)), GradScope::BnAffineOnly).is_ok());
}

#[test]
fn reference_feature_dimension() {
    let cfg = EegNetConfig::default();
    assert_eq!(cfg.feature_dim(), 192);
    let net: Network<f32> = Network::eegnet(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(net.feature_dim(), 192);
    assert_eq!(net.input_dims(), Dims::new(1, 1, 30, 384));
    let x = Tensor4::zeros(Dims::new(1, 1, 30, 384));
    let f = net.forward_eval(&x).unwrap();
    assert_eq!(f.features.dim(), (1, 192));
    assert_eq!(f.logits.dim(), (1, 2));
}

#[test]
fn zero_classifier_gives_uniform_probabilities() {
    let cfg = small_cfg();
    let mut net = small_net(9);
    let head = net.classifier_mut();
    head.weight.iter_mut().for_each(|w| *w = 0.0);
    head.bias.iter_mut().for_each(|b| *b = 0.0);
    let f = net.forward_eval(&input(10, 4, &cfg)).unwrap();
    for row in f.logits.rows() {
        assert_eq!(softmax(&row.to_vec()), vec![0.5, 0.5]);
    }
}

#[test]
fn construction_and_forward_are_deterministic() {
    let cfg = small_cfg();
    let a: Network<f32> = Network::eegnet(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b: Network<f32> = Network::eegnet(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(a, b);
    let x = input(12, 2, &cfg).cast::<f32>();
    assert_eq!(a.forward_eval(&x).unwrap().logits, b.forward_eval(&x).unwrap().logits);
}

#[test]
fn dropout_only_acts_in_training_with_rng() {
    let cfg = small_cfg();
    let net = small_net(13);
    let x = input(14, 2, &cfg);
    let mut a = net.clone();
    let plain = a.forward(&x, Pass::Train, None).unwrap().logits;
    let mut b = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dropped = b.forward(&x, Pass::Train, Some(&mut rng)).unwrap().logits;
    assert_ne!(plain, dropped);
    let mut c = net.clone();
    c.set_bn_mode(BnMode::FixedSource);
    let eval = c.forward(&x, Pass::Adapt, Some(&mut rng)).unwrap().logits;
    assert_eq!(eval, net.forward_eval(&x).unwrap().logits);
}

#[test]
fn fixed_source_statistics_never_move() {
    let cfg = small_cfg();
    let mut net = small_net(15);
    let before = net.frozen_fingerprint();
    for s in 0..5 {
        net.forward(&input(s, 4, &cfg), Pass::Adapt, None).unwrap();
        net.forward(&input(s, 1, &cfg), Pass::Eval, None).unwrap();
    }
    assert_eq!(net.frozen_fingerprint(), before);

    net.set_bn_mode(BnMode::TrackRunning);
    net.forward(&input(20, 4, &cfg), Pass::Adapt, None).unwrap();
    assert_ne!(net.frozen_fingerprint(), before);
}

#[test]
fn training_pass_updates_running_statistics() {
    let cfg = small_cfg();
    let mut net = small_net(16);
    let before: Vec<Vec<f64>> = net.bn_layers().map(|b| b.running_mean.clone()).collect();
    net.forward(&input(17, 4, &cfg), Pass::Train, None).unwrap();
    let after: Vec<Vec<f64>> = net.bn_layers().map(|b| b.running_mean.clone()).collect();
    assert_ne!(before, after);
}

#[test]
fn adamw_zero_gradient_only_decays() {
    let mut net = small_net(18);
    for bn in net.bn_layers_mut() {
        bn.gamma.iter_mut().for_each(|g| *g = 1.0);
    }
    let grads = ParamGrads::zeros(&net, GradScope::BnAffineOnly);
    let mut opt = OptState::adamw(0.001, 0.1);
    opt.step(&mut net, &grads).unwrap();
    for bn in net.bn_layers() {
        for &g in &bn.gamma {
            assert!((g - 0.9999).abs() < 1e-12);
        }
    }
}

#[test]
fn adamw_decays_after_the_moment_step() {
    let mut net = small_net(22);
    for bn in net.bn_layers_mut() {
        bn.gamma.iter_mut().for_each(|g| *g = 2.0);
    }
    let mut grads = ParamGrads::zeros(&net, GradScope::BnAffineOnly);
    for layer in grads.layers.iter_mut().filter(|l| !l.is_empty()) {
        layer[0].iter_mut().for_each(|g| *g = 0.5);
    }
    let (lr, wd) = (0.01, 0.1);
    OptState::adamw(lr, wd).step(&mut net, &grads).unwrap();
    // First step: m̂/√v̂ = sign(g), so the moment step moves by lr exactly.
    let moved = 2.0 - lr * 0.5 / (0.5 + 1e-8);
    let expected = moved - lr * wd * moved;
    for bn in net.bn_layers() {
        for &g in &bn.gamma {
            assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
        }
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut net = small_net(19);
    let before: Vec<f64> = net.bn_layers().flat_map(|b| b.beta.clone()).collect();
    let mut grads = ParamGrads::zeros(&net, GradScope::BnAffineOnly);
    for layer in grads.layers.iter_mut().filter(|l| !l.is_empty()) {
        layer[1].iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 3.0 } else { -0.01 });
    }
    let mut opt = OptState::adam(0.001);
    opt.step(&mut net, &grads).unwrap();
    let after: Vec<f64> = net.bn_layers().flat_map(|b| b.beta.clone()).collect();
    for (b, a) in before.iter().zip(&after) {
        assert!(((b - a).abs() - 0.001).abs() < 1e-6, "moved {}", b - a);
    }
}

#[test]
fn adam_and_adamw_agree_without_decay() {
    let cfg = small_cfg();
    let mut a = small_net(20);
    let mut b = a.clone();
    let mut oa = OptState::new(OptKind::Adam, 0.01, 0.0);
    let mut ob = OptState::new(OptKind::AdamW, 0.01, 0.0);
    let c = Array2::from_shape_vec((2, 2), vec![1.0, -1.0, 0.5, 0.25]).unwrap();
    for s in 0..10 {
        let x = input(100 + s, 2, &cfg);
        let fa = a.forward_eval(&x).unwrap();
        let ga = a.backward(&fa.cache, &c, GradScope::AllParams).unwrap();
        oa.step(&mut a, &ga).unwrap();
        let fb = b.forward_eval(&x).unwrap();
        let gb = b.backward(&fb.cache, &c, GradScope::AllParams).unwrap();
        ob.step(&mut b, &gb).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.sawt");
    let net = small_net(21).cast::<f32>();
    checkpoint::save(&net, &path).unwrap();
    let back: Network<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.frozen_fingerprint(), net.frozen_fingerprint());
    assert!(checkpoint::load::<f32>(&dir.path().join("missing")).is_err());
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{what}: {x} vs {y}");
    }
}

#[test]
fn encoded_path_matches_generic_forward_and_gradients() {
    let cfg = small_cfg();
    let x = input(30, 3, &cfg);
    let c = Array2::from_shape_vec((3, 2), vec![0.4, -1.0, 0.9, 0.1, -0.5, 0.3]).unwrap();
    for mode in [BnMode::FixedSource, BnMode::TrackRunning, BnMode::BatchOnly] {
        for pass in [Pass::Train, Pass::Adapt, Pass::Eval] {
            let mut base = small_net(31);
            base.set_bn_mode(mode);
            let mut generic = base.clone();
            let fg = generic.forward(&x, pass, None).unwrap();
            let mut folded = base.clone();
            let e = folded.encode(&x).unwrap();
            let fe = folded.forward_encoded(&e, pass).unwrap();
            let tag = format!("{mode:?}/{pass:?}");
            assert_close(fg.logits.as_slice().unwrap(), fe.logits.as_slice().unwrap(), 1e-10, &tag);
            assert_close(fg.features.as_slice().unwrap(), fe.features.as_slice().unwrap(), 1e-10, &tag);
            for (a, b) in generic.bn_layers().zip(folded.bn_layers()) {
                assert_close(&a.running_mean, &b.running_mean, 1e-10, &tag);
                assert_close(&a.running_var, &b.running_var, 1e-10, &tag);
            }
            let gg = base.backward(&fg.cache, &c, GradScope::BnAffineOnly).unwrap();
            let ge = base.backward(&fe.cache, &c, GradScope::BnAffineOnly).unwrap();
            let gv: Vec<f64> = gg.values().collect();
            let ev: Vec<f64> = ge.values().collect();
            assert_close(&gv, &ev, 1e-9, &tag);
            assert!(base.backward(&fe.cache, &c, GradScope::AllParams).is_err());
        }
    }
}

#[test]
fn encodings_stack_like_their_inputs() {
    let cfg = small_cfg();
    let net = small_net(32);
    let xs: Vec<Tensor4<f64>> = (0..3).map(|s| input(40 + s, 1, &cfg)).collect();
    let parts: Vec<_> = xs.iter().map(|x| net.encode(x).unwrap()).collect();
    let stacked = eegtta_core::nn::Encoded::stack(&parts).unwrap();
    assert_eq!(stacked.batch(), 3);
    assert_eq!(stacked, net.encode(&Tensor4::stack(&xs).unwrap()).unwrap());
}

#[test]
fn unfoldable_stack_falls_back_to_prefix() {
    use eegtta_core::nn::{BnState, Conv2d, Linear, Padding};
    let layers = vec![
        Layer::Conv2d(Conv2d::new(1, 2, 1, (1, 3), Padding::same(1, 3)).unwrap()),
        Layer::BatchNorm(BnState::new(2)),
        Layer::Elu,
        Layer::Flatten,
        Layer::Linear(Linear::new(2 * 2 * 8, 2)),
    ];
    let mut net: Network<f64> = Network::new(Dims::new(1, 1, 2, 8), layers).unwrap();
    net.init_glorot(&mut ChaCha8Rng::seed_from_u64(0));
    let x = Tensor4::from_vec(Dims::new(2, 1, 2, 8), (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let e = net.encode(&x).unwrap();
    assert_eq!(net.forward_encoded_eval(&e).unwrap().logits, net.forward_eval(&x).unwrap().logits);
}
