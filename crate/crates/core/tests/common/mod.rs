//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use viewtransfer::density::{fit_flow, FlowConfig, FlowModel};
use viewtransfer::nn::{Layer, LabeledData, Mode, Network};

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn normal_draws(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub fn trapezoid(ys: &[f64], step: f64) -> f64 {
    step * (ys.iter().sum::<f64>() - 0.5 * (ys[0] + ys[ys.len() - 1]))
}

/// A briefly trained flow, so that every parameter is non-zero.
pub fn trained_flow(points: &[Vec<f64>], iterations: usize) -> FlowModel {
    let cfg = FlowConfig {
        layer_count: 4,
        coupling_net_width: 8,
        training_iterations: iterations,
        learning_rate: 1e-2,
        ..FlowConfig::default()
    };
    fit_flow(points, &cfg).unwrap()
}

/// Worst relative error between the analytic flow NLL gradient and central
/// differences.
pub fn flow_gradient_error(flow: &FlowModel, points: &[Vec<f64>]) -> f64 {
    let (_, grad) = flow.loss_and_gradient(points);
    let params = flow.parameters();
    let step = 1e-5;
    let mut probe = flow.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += step;
        probe.set_parameters(&p);
        let up = probe.loss_and_gradient(points).0;
        p[i] -= 2.0 * step;
        probe.set_parameters(&p);
        let down = probe.loss_and_gradient(points).0;
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * step)));
    }
    worst
}

/// Worst gap between the analytic log-det and the log-abs-determinant of a
/// central-difference Jacobian, in 2-D.
pub fn flow_log_det_error(flow: &FlowModel, points: &[Vec<f64>]) -> f64 {
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for x in points {
        let (_, log_det) = flow.forward(x);
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += step;
            down[j] -= step;
            let (hu, _) = flow.forward(&up);
            let (hd, _) = flow.forward(&down);
            for i in 0..2 {
                jac[i][j] = (hu[i] - hd[i]) / (2.0 * step);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        worst = worst.max((det.abs().ln() - log_det).abs());
    }
    worst
}

/// Minimum cost over every monotone, continuous warp path, by exhaustive
/// enumeration.
pub fn dtw_brute_force(x: &[f64], y: &[f64]) -> f64 {
    fn walk(x: &[f64], y: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (x[i] - y[j]).abs();
        if i == x.len() - 1 && j == y.len() - 1 {
            *best = best.min(acc);
            return;
        }
        if i + 1 < x.len() {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < y.len() {
            walk(x, y, i, j + 1, acc, best);
        }
        if i + 1 < x.len() && j + 1 < y.len() {
            walk(x, y, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    best
}

/// Straight-line SFA: naive DFT per window, explicit linear bin search.
pub fn reference_histogram(
    x: &[f64],
    breakpoints: &[Vec<f64>],
    w: usize,
    l: usize,
    mean_norm: bool,
) -> BTreeMap<String, usize> {
    let mut words = Vec::new();
    for start in 0..=x.len() - w {
        let window = &x[start..start + w];
        let mu = if mean_norm { window.iter().sum::<f64>() / w as f64 } else { 0.0 };
        let first = if mean_norm { 1 } else { 0 };
        let mut word = String::new();
        for c in 0..l / 2 {
            let k = first + c;
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..w {
                let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / w as f64;
                re += (window[n] - mu) * ang.cos();
                im -= (window[n] - mu) * ang.sin();
            }
            for (pos, v) in [(2 * c, re), (2 * c + 1, im)] {
                let mut sym = 0;
                for b in &breakpoints[pos] {
                    if v >= *b {
                        sym += 1;
                    }
                }
                word.push((b'a' + sym as u8) as char);
            }
        }
        words.push(word);
    }
    let mut hist = BTreeMap::new();
    for (i, wd) in words.iter().enumerate() {
        if i == 0 || words[i - 1] != *wd {
            *hist.entry(wd.clone()).or_insert(0) += 1;
        }
    }
    hist
}

pub fn reference_boss(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let mut ab = 0.0;
    for (w, &ca) in a {
        let cb = b.get(w).copied().unwrap_or(0);
        ab += (ca as f64 - cb as f64).powi(2);
    }
    let mut ba = 0.0;
    for (w, &cb) in b {
        let ca = a.get(w).copied().unwrap_or(0);
        ba += (cb as f64 - ca as f64).powi(2);
    }
    (ab + ba) / 2.0
}

const FD_STEP: f64 = 1e-5;

fn weighted_sum(out: &ArrayD<f64>, weights: &ArrayD<f64>) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Checks one layer in isolation against `L = <layer(x), R>` for a fixed
/// random `R`. Dropout masks are reproduced by reseeding before every pass.
/// Returns the worst relative error over inputs and parameters.
pub fn layer_gradient_error(layer: &Layer, x: &ArrayD<f64>, mode: Mode) -> f64 {
    let run = |l: &Layer, input: &ArrayD<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        l.forward(input, mode, &mut rng)
    };
    let (out, cache, _) = run(layer, x);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let weights = out.mapv(|_| rng.random_range(-1.0..1.0));
    let (dx, dparams) = layer.backward(&cache, &weights);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        let mut down = x.clone();
        up.as_slice_mut().unwrap()[i] += FD_STEP;
        down.as_slice_mut().unwrap()[i] -= FD_STEP;
        let numeric = (weighted_sum(&run(layer, &up).0, &weights) - weighted_sum(&run(layer, &down).0, &weights))
            / (2.0 * FD_STEP);
        worst = worst.max(relative_error(dx.as_slice().unwrap()[i], numeric));
    }
    let mut probe = layer.clone();
    for (t, grad) in dparams.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.parameters_mut()[t][i];
            probe.parameters_mut()[t][i] = original + FD_STEP;
            let up = weighted_sum(&run(&probe, x).0, &weights);
            probe.parameters_mut()[t][i] = original - FD_STEP;
            let down = weighted_sum(&run(&probe, x).0, &weights);
            probe.parameters_mut()[t][i] = original;
            worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Worst relative error between backpropagated cross-entropy gradients and
/// central differences over every parameter of `net`.
pub fn network_gradient_error(net: &Network, x: &Array3<f64>, labels: &[usize], mode: Mode) -> f64 {
    let loss = |n: &Network| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        n.loss_and_gradients(x, labels, mode, &mut rng).unwrap()
    };
    let analytic = loss(net).gradients;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.parameters_mut()[t][i];
            probe.parameters_mut()[t][i] = original + FD_STEP;
            let up = loss(&probe).loss;
            probe.parameters_mut()[t][i] = original - FD_STEP;
            let down = loss(&probe).loss;
            probe.parameters_mut()[t][i] = original;
            worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Gives every batch-norm layer non-trivial running statistics and affine
/// parameters so that eval-mode checks exercise them.
pub fn randomize_batch_norm(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        if let Layer::BatchNorm(bn) = layer {
            bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
            bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// 20 samples in `(d, m)`, class 1 offset by +1 and class 0 by -1 in every
/// entry, plus uniform noise of half-width 0.5: separable by the mean.
pub fn separable_fixture(d: usize, m: usize, seed: u64) -> LabeledData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let inputs = Array3::from_shape_fn((20, d, m), |(i, _, _)| {
        let shift = if labels[i] == 1 { 1.0 } else { -1.0 };
        shift + rng.random_range(-0.5..0.5)
    });
    LabeledData::new(inputs, labels).unwrap()
}
