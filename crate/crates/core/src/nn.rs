//! Small dense and 1-D convolutional classifiers with hand-written
//! backpropagation and AdaM training.
//!
//! Activations flow through layers as dynamic-rank arrays: `(B, C, T)` for
//! the convolutional stack and `(B, F)` after flattening or pooling.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, View};
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("cannot evaluate on an empty dataset")]
    EmptyData,
    #[error("networks differ in {dimension}: {source_value} vs {target_value}")]
    Incompatible {
        dimension: &'static str,
        source_value: String,
        target_value: String,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Fcn,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "fcn" => Ok(Self::Fcn),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub arch: Architecture,
    pub input_channels: usize,
    pub input_length: usize,
    pub class_count: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_kernels")]
    pub kernel_sizes: [usize; 3],
    #[serde(default = "default_filters")]
    pub fcn_filters: [usize; 3],
    #[serde(default = "default_hidden")]
    pub mlp_hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dropout() -> f64 {
    0.2
}
fn default_kernels() -> [usize; 3] {
    [8, 5, 3]
}
fn default_filters() -> [usize; 3] {
    [128, 256, 128]
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

impl NetworkConfig {
    pub fn new(arch: Architecture, input_channels: usize, input_length: usize, class_count: usize) -> Self {
        Self {
            arch,
            input_channels,
            input_length,
            class_count,
            dropout_rate: default_dropout(),
            kernel_sizes: default_kernels(),
            fcn_filters: default_filters(),
            mlp_hidden: default_hidden(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NnError::Config(m));
        if self.input_channels == 0 || self.input_length == 0 {
            return fail("input channels and length must be positive".into());
        }
        if self.class_count < 2 {
            return fail(format!("need at least 2 classes, got {}", self.class_count));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        match self.arch {
            Architecture::Mlp => {
                if self.mlp_hidden.contains(&0) {
                    return fail("hidden widths must be positive".into());
                }
            }
            Architecture::Fcn => {
                if self.fcn_filters.contains(&0) {
                    return fail("filter counts must be positive".into());
                }
                for &k in &self.kernel_sizes {
                    if k == 0 || k > self.input_length {
                        return fail(format!(
                            "kernel size {k} must lie in [1, input length {}]",
                            self.input_length
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Uniform on `[-limit, limit]` with `limit = sqrt(6 / fan_in)`.
fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-limit..=limit)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = he_uniform(rng, inputs, inputs * outputs);
        Self {
            weight: Array2::from_shape_vec((outputs, inputs), w).expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }
}

/// Stride-1 convolution with "same" zero padding: `(k - 1) / 2` on the
/// left, the rest on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    /// `(out, in, k)`
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

impl Conv1d {
    pub fn new(inputs: usize, outputs: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = he_uniform(rng, inputs * kernel, outputs * inputs * kernel);
        Self {
            weight: Array3::from_shape_vec((outputs, inputs, kernel), w).expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn flat_weight(&self) -> Array2<f64> {
        let (o, i, k) = self.weight.dim();
        self.weight
            .to_shape((o, i * k))
            .expect("contiguous weight")
            .to_owned()
    }

    /// Unrolls one `(C, T)` sample into a `(C * k, T)` patch matrix.
    fn im2col(&self, x: &ndarray::ArrayView2<f64>) -> Array2<f64> {
        let (c, t) = x.dim();
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let mut col = Array2::zeros((c * k, t));
        for ci in 0..c {
            for j in 0..k {
                let row = ci * k + j;
                for ti in 0..t {
                    let src = ti + j;
                    if src >= pad && src - pad < t {
                        col[[row, ti]] = x[[ci, src - pad]];
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<f64>, channels: usize, length: usize) -> Array2<f64> {
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let mut x = Array2::zeros((channels, length));
        for ci in 0..channels {
            for j in 0..k {
                let row = ci * k + j;
                for ti in 0..length {
                    let src = ti + j;
                    if src >= pad && src - pad < length {
                        x[[ci, src - pad]] += col[[row, ti]];
                    }
                }
            }
        }
        x
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel normalisation over batch and time. Running statistics are
/// exponential moving averages with weight `BN_MOMENTUM` on the old value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    Conv1d(Conv1d),
    BatchNorm(BatchNorm),
    Relu,
    Dropout { rate: f64 },
    GlobalAvgPool,
    Flatten,
}

/// What a layer's forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Input(ArrayD<f64>),
    Conv { cols: Vec<Array2<f64>>, channels: usize, length: usize },
    BatchNorm { normalized: Array3<f64>, inv_std: Array1<f64>, training: bool, rank: usize },
    Mask(ArrayD<f64>),
    Shape(Vec<usize>),
    None,
}

/// Batch statistics from a train-mode batch-norm pass, used to update the
/// running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

fn as3(x: &ArrayD<f64>) -> Array3<f64> {
    match x.ndim() {
        3 => x.view().into_dimensionality::<Ix3>().expect("rank 3").to_owned(),
        2 => {
            let (b, c) = (x.shape()[0], x.shape()[1]);
            x.to_shape((b, c, 1)).expect("rank 2").to_owned()
        }
        r => panic!("batch norm expects rank 2 or 3, got {r}"),
    }
}

fn from3(y: Array3<f64>, rank: usize) -> ArrayD<f64> {
    if rank == 2 {
        let (b, c, _) = y.dim();
        y.into_shape_with_order((b, c)).expect("rank 2").into_dyn()
    } else {
        y.into_dyn()
    }
}

impl Layer {
    pub fn parameters(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => vec![
                d.weight.as_slice().expect("layout"),
                d.bias.as_slice().expect("layout"),
            ],
            Layer::Conv1d(c) => vec![
                c.weight.as_slice().expect("layout"),
                c.bias.as_slice().expect("layout"),
            ],
            Layer::BatchNorm(b) => vec![
                b.gamma.as_slice().expect("layout"),
                b.beta.as_slice().expect("layout"),
            ],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense(d) => vec![
                d.weight.as_slice_mut().expect("layout"),
                d.bias.as_slice_mut().expect("layout"),
            ],
            Layer::Conv1d(c) => vec![
                c.weight.as_slice_mut().expect("layout"),
                c.bias.as_slice_mut().expect("layout"),
            ],
            Layer::BatchNorm(b) => vec![
                b.gamma.as_slice_mut().expect("layout"),
                b.beta.as_slice_mut().expect("layout"),
            ],
            _ => Vec::new(),
        }
    }

    pub fn forward(
        &self,
        x: &ArrayD<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> (ArrayD<f64>, Cache, Option<(Array1<f64>, Array1<f64>)>) {
        match self {
            Layer::Dense(d) => {
                let x2 = x.view().into_dimensionality::<Ix2>().expect("dense input is (B, F)");
                let y = x2.dot(&d.weight.t()) + &d.bias;
                (y.into_dyn(), Cache::Input(x.clone()), None)
            }
            Layer::Conv1d(conv) => {
                let x3 = x.view().into_dimensionality::<Ix3>().expect("conv input is (B, C, T)");
                let (b, c, t) = x3.dim();
                let w = conv.flat_weight();
                let per_sample: Vec<(Array2<f64>, Array2<f64>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let col = conv.im2col(&x3.index_axis(Axis(0), i));
                        let out = w.dot(&col) + &conv.bias.view().insert_axis(Axis(1));
                        (col, out)
                    })
                    .collect();
                let mut y = Array3::zeros((b, w.nrows(), t));
                let mut cols = Vec::with_capacity(b);
                for (i, (col, out)) in per_sample.into_iter().enumerate() {
                    y.index_axis_mut(Axis(0), i).assign(&out);
                    cols.push(col);
                }
                (y.into_dyn(), Cache::Conv { cols, channels: c, length: t }, None)
            }
            Layer::BatchNorm(bn) => {
                let rank = x.ndim();
                let x3 = as3(x);
                let (b, c, t) = x3.dim();
                let n = (b * t) as f64;
                let (mean, var, training) = match mode {
                    Mode::Train => {
                        let mean = x3.mean_axis(Axis(2)).expect("t>0").mean_axis(Axis(0)).expect("b>0");
                        let mut var = Array1::zeros(c);
                        for ci in 0..c {
                            let m = mean[ci];
                            var[ci] = x3.slice(s![.., ci, ..]).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                        }
                        (mean, var, true)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), false),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                let mut normalized = x3;
                let mut y = Array3::zeros((b, c, t));
                for ci in 0..c {
                    let mut xs = normalized.slice_mut(s![.., ci, ..]);
                    xs.mapv_inplace(|v| (v - mean[ci]) * inv_std[ci]);
                    y.slice_mut(s![.., ci, ..])
                        .assign(&xs.mapv(|v| bn.gamma[ci] * v + bn.beta[ci]));
                }
                let stats = training.then(|| {
                    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    (mean, var.mapv(|v| v * unbiased))
                });
                (
                    from3(y, rank),
                    Cache::BatchNorm { normalized, inv_std, training, rank },
                    stats,
                )
            }
            Layer::Relu => {
                let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                (x * &mask, Cache::Mask(mask), None)
            }
            Layer::Dropout { rate } => {
                if mode == Mode::Eval || *rate == 0.0 {
                    return (x.clone(), Cache::None, None);
                }
                let keep = 1.0 - rate;
                let mask = x.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                (x * &mask, Cache::Mask(mask), None)
            }
            Layer::GlobalAvgPool => {
                let y = x.mean_axis(Axis(2)).expect("time axis non-empty");
                (y, Cache::Shape(x.shape().to_vec()), None)
            }
            Layer::Flatten => {
                let b = x.shape()[0];
                let f = x.len() / b.max(1);
                let y = x.to_shape((b, f)).expect("flatten").to_owned().into_dyn();
                (y, Cache::Shape(x.shape().to_vec()), None)
            }
        }
    }

    /// Returns the input gradient and one flat gradient per parameter
    /// tensor, in `parameters()` order.
    pub fn backward(&self, cache: &Cache, grad: &ArrayD<f64>) -> (ArrayD<f64>, Vec<Vec<f64>>) {
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => {
                let x2 = x.view().into_dimensionality::<Ix2>().expect("rank 2");
                let g = grad.view().into_dimensionality::<Ix2>().expect("rank 2");
                let dw = g.t().dot(&x2);
                let db = g.sum_axis(Axis(0));
                let dx = g.dot(&d.weight);
                (dx.into_dyn(), vec![dw.iter().copied().collect(), db.to_vec()])
            }
            (Layer::Conv1d(conv), Cache::Conv { cols, channels, length }) => {
                let g = grad.view().into_dimensionality::<Ix3>().expect("rank 3");
                let b = g.dim().0;
                let w = conv.flat_weight();
                let parts: Vec<(Array2<f64>, Array2<f64>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let gi = g.index_axis(Axis(0), i);
                        let dw = gi.dot(&cols[i].t());
                        let dcol = w.t().dot(&gi);
                        (dw, conv.col2im(&dcol, *channels, *length))
                    })
                    .collect();
                let mut dw = Array2::zeros(w.dim());
                let mut dx = Array3::zeros((b, *channels, *length));
                for (i, (dwi, dxi)) in parts.into_iter().enumerate() {
                    dw += &dwi;
                    dx.index_axis_mut(Axis(0), i).assign(&dxi);
                }
                let db = g.sum_axis(Axis(2)).sum_axis(Axis(0));
                (dx.into_dyn(), vec![dw.iter().copied().collect(), db.to_vec()])
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { normalized, inv_std, training, rank }) => {
                let g = as3(grad);
                let (b, c, t) = g.dim();
                let n = (b * t) as f64;
                let mut dx = Array3::zeros((b, c, t));
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ci in 0..c {
                    let gs = g.slice(s![.., ci, ..]);
                    let xh = normalized.slice(s![.., ci, ..]);
                    let sum_g: f64 = gs.sum();
                    let sum_gx: f64 = gs.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                    dgamma[ci] = sum_gx;
                    dbeta[ci] = sum_g;
                    let scale = bn.gamma[ci] * inv_std[ci];
                    let mut out = dx.slice_mut(s![.., ci, ..]);
                    if *training {
                        ndarray::Zip::from(&mut out).and(&gs).and(&xh).for_each(|o, &gv, &xv| {
                            *o = scale * (gv - sum_g / n - xv * sum_gx / n);
                        });
                    } else {
                        ndarray::Zip::from(&mut out).and(&gs).for_each(|o, &gv| *o = scale * gv);
                    }
                }
                (from3(dx, *rank), vec![dgamma, dbeta])
            }
            (Layer::Relu, Cache::Mask(mask)) | (Layer::Dropout { .. }, Cache::Mask(mask)) => {
                (grad * mask, Vec::new())
            }
            (Layer::Dropout { .. }, Cache::None) => (grad.clone(), Vec::new()),
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                let t = shape[2] as f64;
                let g = grad.view().insert_axis(Axis(2));
                let dx = g
                    .broadcast(shape.as_slice())
                    .expect("broadcast over time")
                    .mapv(|v| v / t);
                (dx, Vec::new())
            }
            (Layer::Flatten, Cache::Shape(shape)) => {
                let dx = grad.to_shape(shape.as_slice()).expect("unflatten").to_owned();
                (dx, Vec::new())
            }
            (layer, cache) => panic!("cache {cache:?} does not belong to {layer:?}"),
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean categorical cross-entropy and its gradient with respect to the
/// logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = labels.len() as f64;
    let logp = log_softmax(logits);
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / b;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= b;
    (loss, grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inputs `(N, d, m)` with one class index per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: Array3<f64>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(inputs: Array3<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.dim().0 != labels.len() {
            return Err(NnError::Shape {
                expected: format!("{} labels", inputs.dim().0),
                got: labels.len().to_string(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn from_view(view: &View, labels: &[usize]) -> Result<Self> {
        Self::new(view.to_tensor()?, labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> (Array3<f64>, Vec<usize>) {
        (
            self.inputs.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Freeze every layer before global pooling during this run.
    pub freeze_conv: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 64,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            freeze_conv: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!("invalid training config {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Output of one differentiated pass over a batch.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub probabilities: Array2<f64>,
    /// One flat gradient per parameter tensor, in `Network::parameters` order.
    pub gradients: Vec<Vec<f64>>,
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
    #[serde(skip)]
    optimizer: Option<AdamState>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.class_count;
        let mut layers = Vec::new();
        match config.arch {
            Architecture::Mlp => {
                layers.push(Layer::Flatten);
                let mut width = config.input_channels * config.input_length;
                for &h in &config.mlp_hidden {
                    layers.push(Layer::Dense(Dense::new(width, h, &mut rng)));
                    layers.push(Layer::Relu);
                    width = h;
                }
                layers.push(Layer::Dense(Dense::new(width, c, &mut rng)));
            }
            Architecture::Fcn => {
                let mut channels = config.input_channels;
                for (&f, &k) in config.fcn_filters.iter().zip(&config.kernel_sizes) {
                    layers.push(Layer::Conv1d(Conv1d::new(channels, f, k, &mut rng)));
                    layers.push(Layer::BatchNorm(BatchNorm::new(f)));
                    layers.push(Layer::Relu);
                    layers.push(Layer::Dropout { rate: config.dropout_rate });
                    channels = f;
                }
                layers.push(Layer::GlobalAvgPool);
                layers.push(Layer::Dense(Dense::new(channels, c, &mut rng)));
            }
        }
        Ok(Self {
            config,
            layers,
            optimizer: None,
        })
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::parameters_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn optimizer_state(&self) -> Option<&AdamState> {
        self.optimizer.as_ref()
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = None;
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (_, d, m) = x.dim();
        if d != self.config.input_channels || m != self.config.input_length {
            return Err(NnError::Shape {
                expected: format!("(_, {}, {})", self.config.input_channels, self.config.input_length),
                got: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    fn logits(
        &self,
        x: &Array3<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Vec<Cache>, Vec<BatchStats>) {
        let mut h = x.clone().into_dyn();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache, batch) = layer.forward(&h, mode, rng);
            if let Some((mean, var)) = batch {
                stats.push(BatchStats { layer: i, mean, var });
            }
            caches.push(cache);
            h = out;
        }
        let logits = h.into_dimensionality::<Ix2>().expect("logits are (B, c)");
        (logits, caches, stats)
    }

    /// Class probabilities in eval mode.
    pub fn predict(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _, _) = self.logits(x, Mode::Eval, &mut rng);
        Ok(log_softmax(&logits).mapv(f64::exp))
    }

    /// Probabilities under `mode`; train mode draws dropout masks from
    /// `rng` and uses batch statistics without touching running averages.
    pub fn forward(&self, x: &Array3<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let (logits, _, _) = self.logits(x, mode, rng);
        Ok(log_softmax(&logits).mapv(f64::exp))
    }

    pub fn loss_and_gradients(
        &self,
        x: &Array3<f64>,
        labels: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Backprop> {
        self.check_input(x)?;
        if labels.len() != x.dim().0 {
            return Err(NnError::Shape {
                expected: format!("{} labels", x.dim().0),
                got: labels.len().to_string(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.config.class_count) {
            return Err(NnError::Label {
                label,
                classes: self.config.class_count,
            });
        }
        let (logits, caches, batch_stats) = self.logits(x, mode, rng);
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let mut grad = dlogits.into_dyn();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&caches).rev() {
            let (dx, dparams) = layer.backward(cache, &grad);
            per_layer.push(dparams);
            grad = dx;
        }
        per_layer.reverse();
        Ok(Backprop {
            loss,
            probabilities: log_softmax(&logits).mapv(f64::exp),
            gradients: per_layer.into_iter().flatten().collect(),
            batch_stats,
        })
    }

    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        for st in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[st.layer] {
                bn.running_mean = &bn.running_mean * BN_MOMENTUM + &st.mean * (1.0 - BN_MOMENTUM);
                bn.running_var = &bn.running_var * BN_MOMENTUM + &st.var * (1.0 - BN_MOMENTUM);
            }
        }
    }

    /// Parameter tensors that stay fixed when the convolutional stack is
    /// frozen: everything before the first dense layer.
    fn frozen_mask(&self, freeze_conv: bool) -> Vec<bool> {
        let mut mask = Vec::new();
        let mut before_head = true;
        for layer in &self.layers {
            if matches!(layer, Layer::Dense(_)) {
                before_head = false;
            }
            mask.extend(std::iter::repeat_n(freeze_conv && before_head, layer.parameters().len()));
        }
        mask
    }

    pub fn adam_step(&mut self, gradients: &[Vec<f64>], config: &TrainConfig) {
        let skip = self.frozen_mask(config.freeze_conv);
        let sizes: Vec<usize> = self.parameters().iter().map(|p| p.len()).collect();
        let mut state = self.optimizer.take().unwrap_or_else(|| AdamState::new(sizes));
        let grads: Vec<&[f64]> = gradients.iter().map(Vec::as_slice).collect();
        state.update(&mut self.parameters_mut(), &grads, &config.adam(), &skip);
        self.optimizer = Some(state);
    }

    /// Mini-batch training for `epochs` passes, shuffled by `config.seed`.
    pub fn train(
        &mut self,
        data: &LabeledData,
        config: &TrainConfig,
        epochs: usize,
        validation: Option<&LabeledData>,
    ) -> Result<Vec<EpochLog>> {
        config.validate()?;
        if epochs == 0 {
            return Ok(Vec::new());
        }
        if data.is_empty() {
            return Err(NnError::EmptyData);
        }
        self.check_input(&data.inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for chunk in order.chunks(config.batch_size) {
                let (x, y) = data.select(chunk);
                let pass = self.loss_and_gradients(&x, &y, Mode::Train, &mut rng)?;
                if !pass.loss.is_finite() {
                    return Err(NnError::NonFiniteLoss { epoch });
                }
                loss_sum += pass.loss * chunk.len() as f64;
                correct += pass
                    .probabilities
                    .rows()
                    .into_iter()
                    .zip(&y)
                    .filter(|(row, &label)| argmax(row.view()) == label)
                    .count();
                self.apply_batch_stats(&pass.batch_stats);
                self.adam_step(&pass.gradients, config);
            }
            let val_accuracy = validation.map(|v| self.evaluate(v)).transpose()?;
            log.push(EpochLog {
                epoch,
                loss: loss_sum / data.len() as f64,
                train_accuracy: correct as f64 / data.len() as f64,
                val_accuracy,
            });
        }
        Ok(log)
    }

    /// Fraction of samples whose eval-mode argmax equals the label.
    pub fn evaluate(&self, data: &LabeledData) -> Result<f64> {
        if data.is_empty() {
            return Err(NnError::EmptyData);
        }
        let probs = self.predict(&data.inputs)?;
        let correct = probs
            .rows()
            .into_iter()
            .zip(&data.labels)
            .filter(|(row, &label)| argmax(row.view()) == label)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("network serializes");
        std::fs::write(path, json).map_err(|e| NnError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |message: String| NnError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let net: Self = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        net.config.validate()?;
        Ok(net)
    }
}

/// Copies every parameter and running statistic of `source` into a network
/// shaped like `target`, with a fresh optimizer.
pub fn transfer_weights(source: &Network, target: &Network) -> Result<Network> {
    let (s, t) = (&source.config, &target.config);
    let checks: [(&'static str, String, String); 7] = [
        ("arch", format!("{:?}", s.arch), format!("{:?}", t.arch)),
        ("d", s.input_channels.to_string(), t.input_channels.to_string()),
        ("m", s.input_length.to_string(), t.input_length.to_string()),
        ("c", s.class_count.to_string(), t.class_count.to_string()),
        ("kernel_sizes", format!("{:?}", s.kernel_sizes), format!("{:?}", t.kernel_sizes)),
        ("fcn_filters", format!("{:?}", s.fcn_filters), format!("{:?}", t.fcn_filters)),
        ("mlp_hidden", format!("{:?}", s.mlp_hidden), format!("{:?}", t.mlp_hidden)),
    ];
    for (dimension, source_value, target_value) in checks {
        let relevant = match dimension {
            "kernel_sizes" | "fcn_filters" => s.arch == Architecture::Fcn,
            "mlp_hidden" => s.arch == Architecture::Mlp,
            _ => true,
        };
        if relevant && source_value != target_value {
            return Err(NnError::Incompatible {
                dimension,
                source_value,
                target_value,
            });
        }
    }
    Ok(Network {
        config: target.config.clone(),
        layers: source.layers.clone(),
        optimizer: None,
    })
}
