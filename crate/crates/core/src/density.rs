//! Density models over the latent observation set: a Gaussian-kernel KDE for
//! low dimensions and an affine-coupling normalizing flow for high ones.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("flow needs dimension >= 2, got {0}")]
    FlowDimension(usize),
    #[error("points have inconsistent dimension (expected {expected}, found {found})")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite input point")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite flow loss at iteration {0}")]
    Diverged(usize),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DensityError>;

/// Largest dimension handled by KDE when no override is given.
pub const KDE_MAX_DIMENSION: usize = 3;

/// Bandwidth used for a dimension whose sample variance is zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

const LOG_SCALE_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMethod {
    Kde,
    Flow,
}

impl std::str::FromStr for DensityMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kde" => Ok(Self::Kde),
            "flow" => Ok(Self::Flow),
            other => Err(format!("unknown density method {other:?} (expected kde or flow)")),
        }
    }
}

pub fn select_density_method(dimension: usize, method_override: Option<DensityMethod>) -> DensityMethod {
    match method_override {
        Some(m) => m,
        None if dimension <= KDE_MAX_DIMENSION => DensityMethod::Kde,
        None => DensityMethod::Flow,
    }
}

fn check_points(points: &[Vec<f64>], needed: usize) -> Result<usize> {
    if points.len() < needed {
        return Err(DensityError::TooFewPoints {
            needed,
            got: points.len(),
        });
    }
    let d = points[0].len();
    for p in points {
        if p.len() != d {
            return Err(DensityError::Dimension {
                expected: d,
                found: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite);
        }
    }
    Ok(d)
}

fn mean_and_sd(points: &[Vec<f64>], k: usize, ddof: f64) -> (f64, f64) {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
    let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - ddof);
    (mean, var.sqrt())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum BandwidthRule {
    Silverman,
    Scott,
    Fixed { h: f64 },
}

impl Default for BandwidthRule {
    fn default() -> Self {
        Self::Silverman
    }
}

/// Gaussian KDE with a diagonal bandwidth matrix `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub support: Vec<Vec<f64>>,
    /// Diagonal of `H` (per-dimension kernel variances).
    pub bandwidth_diag: Vec<f64>,
}

impl KdeModel {
    /// Builds a model directly from its parts, without the sample-size
    /// requirement of [`fit_kde`].
    pub fn from_parts(support: Vec<Vec<f64>>, bandwidth_diag: Vec<f64>) -> Result<Self> {
        let d = check_points(&support, 1)?;
        if bandwidth_diag.len() != d {
            return Err(DensityError::Dimension {
                expected: d,
                found: bandwidth_diag.len(),
            });
        }
        if bandwidth_diag.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(DensityError::Config("bandwidth entries must be positive".into()));
        }
        Ok(Self {
            support,
            bandwidth_diag,
        })
    }

    pub fn dimension(&self) -> usize {
        self.bandwidth_diag.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dimension();
        let log_norm = -0.5 * d as f64 * (2.0 * PI).ln()
            - 0.5 * self.bandwidth_diag.iter().map(|h| h.ln()).sum::<f64>();
        let terms = self.support.iter().map(|s| {
            let q: f64 = s
                .iter()
                .zip(x)
                .zip(&self.bandwidth_diag)
                .map(|((si, xi), h)| (xi - si).powi(2) / h)
                .sum();
            log_norm - 0.5 * q
        });
        log_sum_exp(terms) - (self.support.len() as f64).ln()
    }

    /// Mixture draws: a uniformly chosen support point plus `N(0, H)` noise.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = Uniform::new(0, self.support.len()).expect("support is non-empty");
        (0..count)
            .map(|_| {
                let centre = &self.support[pick.sample(&mut rng)];
                centre
                    .iter()
                    .zip(&self.bandwidth_diag)
                    .map(|(c, h)| {
                        let z: f64 = rng.sample(StandardNormal);
                        c + h.sqrt() * z
                    })
                    .collect()
            })
            .collect()
    }
}

/// Fits a diagonal-bandwidth Gaussian KDE. Rule factors are applied to the
/// per-dimension sample standard deviation.
pub fn fit_kde(points: &[Vec<f64>], rule: BandwidthRule) -> Result<KdeModel> {
    let d = check_points(points, 2)?;
    let n = points.len() as f64;
    let dd = d as f64;
    let factor = match rule {
        BandwidthRule::Silverman => (4.0 / (dd + 2.0)).powf(1.0 / (dd + 4.0)) * n.powf(-1.0 / (dd + 4.0)),
        BandwidthRule::Scott => n.powf(-1.0 / (dd + 4.0)),
        BandwidthRule::Fixed { h } => {
            if !(h > 0.0) || !h.is_finite() {
                return Err(DensityError::Config(format!("fixed bandwidth {h} must be positive")));
            }
            return KdeModel::from_parts(points.to_vec(), vec![h * h; d]);
        }
    };
    let bandwidth_diag = (0..d)
        .map(|k| {
            let (_, sd) = mean_and_sd(points, k, 1.0);
            let h = factor * sd;
            if h > 0.0 {
                h * h
            } else {
                log::warn!("latent dimension {k} has zero variance; using bandwidth floor {BANDWIDTH_FLOOR}");
                BANDWIDTH_FLOOR * BANDWIDTH_FLOOR
            }
        })
        .collect();
    KdeModel::from_parts(points.to_vec(), bandwidth_diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layer_count: usize,
    pub coupling_net_width: usize,
    pub training_iterations: usize,
    pub learning_rate: f64,
    /// Standard deviation of the dequantization noise added when training
    /// points (nearly) coincide.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layer_count: 6,
            coupling_net_width: 32,
            training_iterations: 2000,
            learning_rate: 1e-3,
            perturbation: 1e-6,
            seed: 0,
        }
    }
}

impl FlowConfig {
    fn validate(&self) -> Result<()> {
        if self.layer_count < 2 {
            return Err(DensityError::Config("flow needs at least 2 coupling layers".into()));
        }
        if self.coupling_net_width == 0 || self.training_iterations == 0 {
            return Err(DensityError::Config("width and iterations must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DensityError::Config("learning rate must be positive".into()));
        }
        if !(self.perturbation >= 0.0) {
            return Err(DensityError::Config("perturbation must be non-negative".into()));
        }
        Ok(())
    }
}

/// One affine coupling layer. Coordinates with `mask[k] == true` condition
/// the scale/translation of the others and pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub mask: Vec<bool>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Output rows: first the raw log-scales, then the translations.
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    cond: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    squashed: Array2<f64>,
    exp_s: Array2<f64>,
}

impl CouplingLayer {
    fn new(d: usize, parity: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mask: Vec<bool> = (0..d).map(|k| (k + parity) % 2 == 0).collect();
        let dc = mask.iter().filter(|&&m| m).count();
        let dt = d - dc;
        let mut uniform = |rows: usize, cols: usize| {
            let limit = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        Self {
            w1: uniform(width, dc),
            b1: Array1::zeros(width),
            w2: uniform(width, width),
            b2: Array1::zeros(width),
            w3: Array2::zeros((2 * dt, width)),
            b3: Array1::zeros(2 * dt),
            mask,
        }
    }

    fn conditioning(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&k| self.mask[k]).collect()
    }

    fn transformed(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&k| !self.mask[k]).collect()
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    /// Returns (hidden activations, squashed raw scales `tanh(raw/c)`, translations).
    fn conditioner(&self, cond: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let h1 = (cond.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        let out = h2.dot(&self.w3.t()) + &self.b3;
        let dt = out.ncols() / 2;
        let squashed = out.slice(s![.., ..dt]).mapv(|r| (r / LOG_SCALE_CLAMP).tanh());
        let shift = out.slice(s![.., dt..]).to_owned();
        (h1, h2, squashed, shift)
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>, LayerCache) {
        let cond = x.select(Axis(1), &self.conditioning());
        let (h1, h2, squashed, shift) = self.conditioner(&cond);
        let log_scale = squashed.mapv(|q| LOG_SCALE_CLAMP * q);
        let exp_s = log_scale.mapv(f64::exp);
        let mut y = x.clone();
        for (j, &col) in self.transformed().iter().enumerate() {
            let mut yc = y.column_mut(col);
            yc *= &exp_s.column(j);
            yc += &shift.column(j);
        }
        let log_det = log_scale.sum_axis(Axis(1));
        let cache = LayerCache {
            input: x.clone(),
            cond,
            h1,
            h2,
            squashed,
            exp_s,
        };
        (y, log_det, cache)
    }

    fn inverse(&self, y: &Array2<f64>) -> Array2<f64> {
        let cond = y.select(Axis(1), &self.conditioning());
        let (_, _, squashed, shift) = self.conditioner(&cond);
        let mut x = y.clone();
        for (j, &col) in self.transformed().iter().enumerate() {
            let mut xc = x.column_mut(col);
            xc -= &shift.column(j);
            xc *= &squashed.column(j).mapv(|q| (-LOG_SCALE_CLAMP * q).exp());
        }
        x
    }

    /// Backpropagates `grad_y` (and `log_det_weight` per unit of log-det) to
    /// the layer input; parameter gradients are written into `grads`.
    fn backward(
        &self,
        cache: &LayerCache,
        grad_y: &Array2<f64>,
        log_det_weight: f64,
        grads: &mut [Vec<f64>],
    ) -> Array2<f64> {
        let trans = self.transformed();
        let cond_idx = self.conditioning();
        let n = grad_y.nrows();
        let dt = trans.len();
        let mut grad_x = grad_y.clone();
        let mut grad_out = Array2::<f64>::zeros((n, 2 * dt));
        for (j, &col) in trans.iter().enumerate() {
            for i in 0..n {
                let gy = grad_y[[i, col]];
                let e = cache.exp_s[[i, j]];
                grad_x[[i, col]] = gy * e;
                let grad_s = gy * cache.input[[i, col]] * e + log_det_weight;
                let q = cache.squashed[[i, j]];
                grad_out[[i, j]] = grad_s * (1.0 - q * q);
                grad_out[[i, dt + j]] = gy;
            }
        }
        let gw3 = grad_out.t().dot(&cache.h2);
        let gb3 = grad_out.sum_axis(Axis(0));
        let ga2 = grad_out.dot(&self.w3) * cache.h2.mapv(|h| 1.0 - h * h);
        let gw2 = ga2.t().dot(&cache.h1);
        let gb2 = ga2.sum_axis(Axis(0));
        let ga1 = ga2.dot(&self.w2) * cache.h1.mapv(|h| 1.0 - h * h);
        let gw1 = ga1.t().dot(&cache.cond);
        let gb1 = ga1.sum_axis(Axis(0));
        let grad_cond = ga1.dot(&self.w1);
        for (j, &col) in cond_idx.iter().enumerate() {
            let mut gc = grad_x.column_mut(col);
            gc += &grad_cond.column(j);
        }
        for (slot, g) in grads.iter_mut().zip([
            gw1.iter().copied().collect(),
            gb1.iter().copied().collect(),
            gw2.iter().copied().collect(),
            gb2.iter().copied().collect(),
            gw3.iter().copied().collect(),
            gb3.iter().copied().collect(),
        ]) {
            *slot = g;
        }
        grad_x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub initial_mean_log_likelihood: f64,
    pub final_mean_log_likelihood: f64,
    pub perturbed: bool,
}

/// Stack of affine coupling layers applied after per-dimension
/// standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dimension: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub layers: Vec<CouplingLayer>,
    pub config: FlowConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

impl FlowModel {
    /// An untrained flow: standardization fitted to `points`, every coupling
    /// layer the identity (zero output weights).
    pub fn initialize(points: &[Vec<f64>], config: &FlowConfig) -> Result<Self> {
        config.validate()?;
        let d = check_points(points, 2)?;
        if d < 2 {
            return Err(DensityError::FlowDimension(d));
        }
        let (mean, scale) = (0..d)
            .map(|k| {
                let (m, sd) = mean_and_sd(points, k, 0.0);
                (m, sd.max(BANDWIDTH_FLOOR))
            })
            .unzip();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = (0..config.layer_count)
            .map(|i| CouplingLayer::new(d, i % 2, config.coupling_net_width, &mut rng))
            .collect();
        Ok(Self {
            dimension: d,
            mean,
            scale,
            layers,
            config: *config,
            fit: None,
        })
    }

    fn standardization_log_det(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn standardize(&self, points: &[Vec<f64>]) -> Array2<f64> {
        Array2::from_shape_fn((points.len(), self.dimension), |(i, k)| {
            (points[i][k] - self.mean[k]) / self.scale[k]
        })
    }

    /// Maps standardized points through every layer.
    fn forward_standardized(&self, z: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Vec<LayerCache>) {
        let mut x = z.clone();
        let mut log_det = Array1::zeros(z.nrows());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, ld, cache) = layer.forward(&x);
            log_det += &ld;
            caches.push(cache);
            x = y;
        }
        (x, log_det, caches)
    }

    fn base_log_density(h: ndarray::ArrayView1<f64>) -> f64 {
        -0.5 * h.len() as f64 * (2.0 * PI).ln() - 0.5 * h.dot(&h)
    }

    /// `h = F(x)` and `log |det dF/dx|`, standardization included.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let z = self.standardize(std::slice::from_ref(&x.to_vec()));
        let (h, log_det, _) = self.forward_standardized(&z);
        (h.row(0).to_vec(), log_det[0] + self.standardization_log_det())
    }

    pub fn inverse(&self, h: &[f64]) -> Vec<f64> {
        self.inverse_batch(&[h.to_vec()]).remove(0)
    }

    pub fn inverse_batch(&self, latents: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut y = Array2::from_shape_fn((latents.len(), self.dimension), |(i, k)| latents[i][k]);
        for layer in self.layers.iter().rev() {
            y = layer.inverse(&y);
        }
        y.rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(k, z)| z * self.scale[k] + self.mean[k])
                    .collect()
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (h, log_det) = self.forward(x);
        Self::base_log_density(ndarray::ArrayView1::from(&h)) + log_det
    }

    pub fn mean_log_likelihood(&self, points: &[Vec<f64>]) -> f64 {
        let z = self.standardize(points);
        self.mean_log_likelihood_standardized(&z)
    }

    fn mean_log_likelihood_standardized(&self, z: &Array2<f64>) -> f64 {
        let (h, log_det, _) = self.forward_standardized(z);
        let total: f64 = h
            .rows()
            .into_iter()
            .zip(log_det.iter())
            .map(|(r, ld)| Self::base_log_density(r) + ld)
            .sum();
        total / z.nrows() as f64 + self.standardization_log_det()
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..self.dimension).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        self.inverse_batch(&latents)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(<[f64]>::len)
            .sum()
    }

    /// All coupling-network parameters, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.parameter_count(), "parameter vector length");
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                t.copy_from_slice(&values[offset..offset + t.len()]);
                offset += t.len();
            }
        }
    }

    /// Mean negative log-likelihood of `points` and its gradient with
    /// respect to [`FlowModel::parameters`].
    pub fn loss_and_gradient(&self, points: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let z = self.standardize(points);
        let (loss, grads) = self.loss_and_gradient_standardized(&z);
        (loss, grads.into_iter().flatten().collect())
    }

    fn loss_and_gradient_standardized(&self, z: &Array2<f64>) -> (f64, Vec<Vec<f64>>) {
        let n = z.nrows() as f64;
        let (h, log_det, caches) = self.forward_standardized(z);
        let loss = -(h
            .rows()
            .into_iter()
            .zip(log_det.iter())
            .map(|(r, ld)| Self::base_log_density(r) + ld)
            .sum::<f64>()
            / n
            + self.standardization_log_det());
        let mut grad = h / n;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); 6 * self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            grad = layer.backward(cache, &grad, -1.0 / n, &mut grads[6 * i..6 * i + 6]);
        }
        (loss, grads)
    }
}

fn min_pairwise_distance(z: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..z.nrows() {
        for j in i + 1..z.nrows() {
            let d = (&z.row(i) - &z.row(j)).mapv(|v| v * v).sum().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Trains a flow by full-batch AdaM on the mean negative log-likelihood.
///
/// When two standardized training points are closer than `1e-8`, every
/// iteration sees the data jittered by `N(0, perturbation^2)` noise.
pub fn fit_flow(points: &[Vec<f64>], config: &FlowConfig) -> Result<FlowModel> {
    check_points(points, 8)?;
    let mut model = FlowModel::initialize(points, config)?;
    let z = model.standardize(points);
    let perturb = config.perturbation > 0.0 && min_pairwise_distance(&z) < 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let initial = model.mean_log_likelihood_standardized(&z);

    let mut params: Vec<Vec<f64>> = model
        .layers
        .iter()
        .flat_map(|l| l.tensors())
        .map(<[f64]>::to_vec)
        .collect();
    let mut state = AdamState::new(params.iter().map(Vec::len));
    for iteration in 0..config.training_iterations {
        let batch = if perturb {
            z.mapv(|v| v + config.perturbation * rng.sample::<f64, _>(StandardNormal))
        } else {
            z.clone()
        };
        let (loss, grads) = model.loss_and_gradient_standardized(&batch);
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(DensityError::Diverged(iteration));
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        {
            let mut param_refs: Vec<&mut [f64]> = params.iter_mut().map(Vec::as_mut_slice).collect();
            state.update(&mut param_refs, &grad_refs, &adam, &[]);
        }
        let flat: Vec<f64> = params.iter().flatten().copied().collect();
        model.set_parameters(&flat);
    }
    let final_ll = model.mean_log_likelihood_standardized(&z);
    if !final_ll.is_finite() {
        return Err(DensityError::Diverged(config.training_iterations));
    }
    model.fit = Some(FitSummary {
        initial_mean_log_likelihood: initial,
        final_mean_log_likelihood: final_ll,
        perturbed: perturb,
    });
    Ok(model)
}

/// A fitted posterior over the latent set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum DensityModel {
    Kde(KdeModel),
    Flow(FlowModel),
}

impl DensityModel {
    pub fn fit(
        points: &[Vec<f64>],
        method: DensityMethod,
        bandwidth: BandwidthRule,
        flow: &FlowConfig,
    ) -> Result<Self> {
        match method {
            DensityMethod::Kde => fit_kde(points, bandwidth).map(Self::Kde),
            DensityMethod::Flow => fit_flow(points, flow).map(Self::Flow),
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            DensityModel::Kde(m) => m.dimension(),
            DensityModel::Flow(m) => m.dimension,
        }
    }

    pub fn method(&self) -> DensityMethod {
        match self {
            DensityModel::Kde(_) => DensityMethod::Kde,
            DensityModel::Flow(_) => DensityMethod::Flow,
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            DensityModel::Kde(m) => m.log_density(x),
            DensityModel::Flow(m) => m.log_density(x),
        }
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        match self {
            DensityModel::Kde(m) => m.sample(count, seed),
            DensityModel::Flow(m) => m.sample(count, seed),
        }
    }

    /// A representative point: the support mean (KDE) or the data mean (flow).
    pub fn centre(&self) -> Vec<f64> {
        match self {
            DensityModel::Kde(m) => {
                let n = m.support.len() as f64;
                (0..m.dimension())
                    .map(|k| m.support.iter().map(|p| p[k]).sum::<f64>() / n)
                    .collect()
            }
            DensityModel::Flow(m) => m.mean.clone(),
        }
    }
}

/// A rectangular evaluation grid over one or two coordinates of the model;
/// remaining coordinates are held at `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
    pub points_per_axis: usize,
    pub anchor: Vec<f64>,
}

impl GridSpec {
    fn validate(&self, dimension: usize) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(DensityError::Grid("grids cover one or two axes".into()));
        }
        if self.axes.len() != self.bounds.len() {
            return Err(DensityError::Grid("one bound pair per axis is required".into()));
        }
        if self.axes.iter().any(|&a| a >= dimension) {
            return Err(DensityError::Grid(format!("axis out of range for dimension {dimension}")));
        }
        if self.axes.len() == 2 && self.axes[0] == self.axes[1] {
            return Err(DensityError::Grid("grid axes must differ".into()));
        }
        if self.anchor.len() != dimension {
            return Err(DensityError::Grid("anchor must match the model dimension".into()));
        }
        if self.points_per_axis < 2 {
            return Err(DensityError::Grid("need at least 2 points per axis".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(DensityError::Grid(format!("bounds [{lo}, {hi}] are not increasing")));
            }
        }
        Ok(())
    }

    fn ticks(&self, axis: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds[axis];
        let n = self.points_per_axis;
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Evaluates the density on the grid. Each row is the grid coordinates
/// followed by the density value; the first axis varies slowest.
pub fn evaluate_grid(model: &DensityModel, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    grid.validate(model.dimension())?;
    let mut rows = Vec::new();
    let first = grid.ticks(0);
    let second = if grid.axes.len() == 2 { grid.ticks(1) } else { vec![f64::NAN] };
    for &a in &first {
        for &b in &second {
            let mut point = grid.anchor.clone();
            point[grid.axes[0]] = a;
            let mut row = vec![a];
            if grid.axes.len() == 2 {
                point[grid.axes[1]] = b;
                row.push(b);
            }
            row.push(model.log_density(&point).exp());
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_grid_csv(rows: &[Vec<f64>], out: impl Write) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let coords = rows.first().map_or(1, |r| r.len() - 1);
    let header: Vec<String> = (1..=coords).map(|i| format!("x{i}")).collect();
    writeln!(out, "{},density", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}
