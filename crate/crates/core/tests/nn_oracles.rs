//! Network layers and training against finite differences, direct
//! convolution and counting oracles.

use ndarray::{Array1, Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewtransfer::nn::*;

mod common;
use common::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

#[test]
fn dense_gradients() {
    let layer = Layer::Dense(Dense::new(5, 3, &mut rng()));
    let err = layer_gradient_error(&layer, &random_tensor(&[4, 5], 1), Mode::Train);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_gradients_for_odd_and_even_kernels() {
    for k in 1..=5 {
        let layer = Layer::Conv1d(Conv1d::new(2, 3, k, &mut rng()));
        let err = layer_gradient_error(&layer, &random_tensor(&[3, 2, 7], k as u64), Mode::Train);
        assert!(err < 1e-4, "kernel {k}: {err}");
    }
}

#[test]
fn batch_norm_gradients_in_both_modes() {
    let mut bn = BatchNorm::new(3);
    bn.gamma = Array1::from(vec![0.5, 1.5, -1.0]);
    bn.beta = Array1::from(vec![0.1, -0.2, 0.3]);
    bn.running_mean = Array1::from(vec![0.2, -0.1, 0.0]);
    bn.running_var = Array1::from(vec![0.8, 1.3, 2.0]);
    let layer = Layer::BatchNorm(bn);
    for mode in [Mode::Train, Mode::Eval] {
        for shape in [vec![4, 3, 5], vec![6, 3]] {
            let err = layer_gradient_error(&layer, &random_tensor(&shape, 3), mode);
            assert!(err < 1e-4, "{mode:?} {shape:?}: {err}");
        }
    }
}

#[test]
fn parameter_free_layer_gradients() {
    let x = random_tensor(&[3, 4, 6], 4);
    for layer in [
        Layer::Relu,
        Layer::Dropout { rate: 0.3 },
        Layer::GlobalAvgPool,
        Layer::Flatten,
    ] {
        for mode in [Mode::Train, Mode::Eval] {
            let err = layer_gradient_error(&layer, &x, mode);
            assert!(err < 1e-4, "{layer:?} {mode:?}: {err}");
        }
    }
}

fn small_fcn(d: usize, m: usize, c: usize, dropout: f64) -> NetworkConfig {
    NetworkConfig {
        fcn_filters: [3, 4, 3],
        kernel_sizes: [4, 3, 2],
        dropout_rate: dropout,
        seed: 2,
        ..NetworkConfig::new(Architecture::Fcn, d, m, c)
    }
}

fn small_mlp(d: usize, m: usize, c: usize) -> NetworkConfig {
    NetworkConfig {
        mlp_hidden: vec![6, 5],
        seed: 2,
        ..NetworkConfig::new(Architecture::Mlp, d, m, c)
    }
}

fn batch(b: usize, d: usize, m: usize, c: usize, seed: u64) -> (Array3<f64>, Vec<usize>) {
    let x = random_tensor(&[b, d, m], seed)
        .into_dimensionality()
        .unwrap();
    (x, (0..b).map(|i| i % c).collect())
}

#[test]
fn composed_network_gradients() {
    let (x, y) = batch(5, 2, 9, 3, 8);
    let mlp = Network::new(small_mlp(2, 9, 3)).unwrap();
    let err = network_gradient_error(&mlp, &x, &y, Mode::Eval);
    assert!(err < 1e-4, "mlp: {err}");

    let mut fcn = Network::new(small_fcn(2, 9, 3, 0.2)).unwrap();
    randomize_batch_norm(&mut fcn, 4);
    let err = network_gradient_error(&fcn, &x, &y, Mode::Eval);
    assert!(err < 1e-4, "fcn eval: {err}");

    // batch statistics, dropout off
    let mut fcn = Network::new(small_fcn(2, 9, 3, 0.0)).unwrap();
    randomize_batch_norm(&mut fcn, 5);
    let err = network_gradient_error(&fcn, &x, &y, Mode::Train);
    assert!(err < 1e-4, "fcn train: {err}");
}

/// `y[o, t] = b[o] + sum_{i, j} w[o, i, j] * x[i, t + j - (k - 1) / 2]`,
/// zero outside the input.
fn direct_convolution(conv: &Conv1d, x: &Array2<f64>) -> Array2<f64> {
    let (o, c, k) = conv.weight.dim();
    let t = x.ncols();
    let pad = (k - 1) as isize / 2;
    Array2::from_shape_fn((o, t), |(oi, ti)| {
        let mut acc = conv.bias[oi];
        for ci in 0..c {
            for j in 0..k {
                let src = ti as isize + j as isize - pad;
                if (0..t as isize).contains(&src) {
                    acc += conv.weight[[oi, ci, j]] * x[[ci, src as usize]];
                }
            }
        }
        acc
    })
}

#[test]
fn conv_matches_direct_definition() {
    let mut r = rng();
    for k in [1, 2, 3, 6] {
        let mut conv = Conv1d::new(3, 2, k, &mut r);
        conv.bias = Array1::from(vec![0.3, -0.7]);
        let x = random_tensor(&[2, 3, 10], k as u64);
        let (y, _, _) = Layer::Conv1d(conv.clone()).forward(&x, Mode::Eval, &mut r);
        for b in 0..2 {
            let xb = x.index_axis(Axis(0), b).into_dimensionality().unwrap().to_owned();
            let expected = direct_convolution(&conv, &xb);
            let got = y.index_axis(Axis(0), b);
            for (a, e) in got.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unit_kernel_shifts_input_through_identity_batch_norm() {
    let k = 5;
    let mut weight = Array3::zeros((1, 1, k));
    weight[[0, 0, 0]] = 1.0;
    let conv = Layer::Conv1d(Conv1d {
        weight,
        bias: Array1::zeros(1),
    });
    // running mean 0, running var 1 - eps: eval mode is exactly the identity
    let mut bn = BatchNorm::new(1);
    bn.running_var[0] = 1.0 - BN_EPSILON;
    let bn = Layer::BatchNorm(bn);
    let x = random_tensor(&[1, 1, 9], 6);
    let (h, _, _) = conv.forward(&x, Mode::Eval, &mut rng());
    let (y, _, _) = bn.forward(&h, Mode::Eval, &mut rng());
    let pad = (k - 1) / 2;
    for t in 0..9 {
        let expected = if t >= pad { x[[0, 0, t - pad]] } else { 0.0 };
        assert!((y[[0, 0, t]] - expected).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn probabilities_are_distributions(seed in any::<u64>(), scale in 0.01f64..100.0, fcn in any::<bool>()) {
        let cfg = if fcn { small_fcn(2, 6, 4, 0.2) } else { small_mlp(2, 6, 4) };
        let net = Network::new(NetworkConfig { seed, ..cfg }).unwrap();
        let x = random_tensor(&[3, 2, 6], seed).mapv(|v| v * scale).into_dimensionality().unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let probs = net.forward(&x, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for row in probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}

#[test]
fn eval_batch_norm_is_batch_independent() {
    let mut net = Network::new(small_fcn(2, 8, 3, 0.2)).unwrap();
    randomize_batch_norm(&mut net, 9);
    let (x, _) = batch(6, 2, 8, 3, 10);
    let batched = net.predict(&x).unwrap();
    for i in 0..6 {
        let single = net.predict(&x.slice(ndarray::s![i..i + 1, .., ..]).to_owned()).unwrap();
        for (a, b) in single.row(0).iter().zip(batched.row(i)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn mlp_overfits_separable_fixture_for_five_seeds() {
    for seed in 0..5 {
        let data = separable_fixture(2, 5, seed);
        let mut net = Network::new(NetworkConfig {
            seed,
            ..NetworkConfig::new(Architecture::Mlp, 2, 5, 2)
        })
        .unwrap();
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let log = net.train(&data, &train, 200, None).unwrap();
        assert_eq!(log.len(), 200);
        assert_eq!(net.evaluate(&data).unwrap(), 1.0, "seed {seed}");
        assert!(log[49].loss < log[0].loss);
    }
}

#[test]
fn fcn_training_reduces_loss_on_most_seeds() {
    let mut improved = 0;
    for seed in 0..5 {
        let data = separable_fixture(1, 12, 100 + seed);
        let mut net = Network::new(NetworkConfig {
            seed,
            ..small_fcn(1, 12, 2, 0.2)
        })
        .unwrap();
        let log = net
            .train(&data, &TrainConfig { batch_size: 8, seed, ..TrainConfig::default() }, 30, None)
            .unwrap();
        if log.last().unwrap().loss <= log[0].loss {
            improved += 1;
        }
    }
    assert!(improved >= 4, "{improved} of 5");
}

#[test]
fn uniform_network_accuracy_follows_tie_break() {
    let mut net = Network::new(small_mlp(1, 4, 3)).unwrap();
    if let Some(Layer::Dense(d)) = net.layers.last_mut() {
        d.weight.fill(0.0);
        d.bias.fill(0.0);
    }
    let mut r = rng();
    let labels: Vec<usize> = (0..30).map(|_| r.random_range(0..3)).collect();
    let expected = labels.iter().filter(|&&l| l == 0).count() as f64 / 30.0;
    let data = LabeledData::new(Array3::from_shape_fn((30, 1, 4), |_| r.random()), labels).unwrap();
    assert_eq!(net.evaluate(&data).unwrap(), expected);
    assert_eq!(net.evaluate(&data).unwrap(), net.evaluate(&data).unwrap());
    let empty = LabeledData::new(Array3::zeros((0, 1, 4)), vec![]).unwrap();
    assert!(matches!(net.evaluate(&empty), Err(NnError::EmptyData)));
}

#[test]
fn perfect_predictions_score_one() {
    let data = separable_fixture(1, 3, 1);
    let mut net = Network::new(small_mlp(1, 3, 2)).unwrap();
    net.train(&data, &TrainConfig::default(), 300, None).unwrap();
    let predicted: Vec<usize> = net
        .predict(&data.inputs)
        .unwrap()
        .rows()
        .into_iter()
        .map(|r| argmax(r))
        .collect();
    let relabeled = LabeledData::new(data.inputs.clone(), predicted).unwrap();
    assert_eq!(net.evaluate(&relabeled).unwrap(), 1.0);
}

#[test]
fn transfer_copies_everything_and_resets_optimizer() {
    let data = separable_fixture(2, 8, 3);
    let cfg = small_fcn(2, 8, 2, 0.2);
    let mut source = Network::new(cfg.clone()).unwrap();
    source
        .train(&data, &TrainConfig { batch_size: 7, ..TrainConfig::default() }, 5, None)
        .unwrap();
    assert!(source.optimizer_state().is_some());
    let target = Network::new(NetworkConfig { seed: 77, ..cfg }).unwrap();
    let mut moved = transfer_weights(&source, &target).unwrap();
    assert!(moved.optimizer_state().is_none());
    assert_eq!(moved.evaluate(&data).unwrap(), source.evaluate(&data).unwrap());
    moved.train(&data, &TrainConfig::default(), 0, None).unwrap();
    assert_eq!(moved.layers, source.layers);
}

#[test]
fn transfer_rejects_each_differing_dimension() {
    let base = small_mlp(2, 4, 3);
    let src = Network::new(base.clone()).unwrap();
    for (cfg, dim) in [
        (small_mlp(1, 4, 3), "d"),
        (small_mlp(2, 5, 3), "m"),
        (small_mlp(2, 4, 2), "c"),
        (small_fcn(2, 4, 3, 0.2), "arch"),
        (NetworkConfig { mlp_hidden: vec![6], ..base.clone() }, "mlp_hidden"),
    ] {
        let tgt = Network::new(cfg).unwrap();
        match transfer_weights(&src, &tgt) {
            Err(NnError::Incompatible { dimension, .. }) => assert_eq!(dimension, dim),
            other => panic!("expected {dim} mismatch, got {other:?}"),
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut net = Network::new(small_fcn(2, 6, 3, 0.2)).unwrap();
    randomize_batch_norm(&mut net, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back, net);
    let text = std::fs::read_to_string(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json["layers"][1]["running_var"].is_object());
}

#[test]
fn shape_and_label_errors() {
    let net = Network::new(small_mlp(2, 4, 3)).unwrap();
    let bad: Array3<f64> = Array3::zeros((2, 3, 4));
    assert!(matches!(net.predict(&bad), Err(NnError::Shape { .. })));
    let x: Array3<f64> = Array3::zeros((2, 2, 4));
    assert!(matches!(
        net.loss_and_gradients(&x, &[0, 3], Mode::Eval, &mut rng()),
        Err(NnError::Label { label: 3, classes: 3 })
    ));
}
