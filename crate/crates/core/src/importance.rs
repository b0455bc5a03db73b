//! Importance sampling from a fitted density, matrix-norm scoring of each
//! source view, and proportional epoch allocation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::MultiViewDataset;
use crate::density::{
    select_density_method, BandwidthRule, DensityError, DensityMethod, DensityModel, FlowConfig,
};
use crate::distance::{build_latent_set, DistanceError, ImportanceLatentSet, Measure};

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("invalid scores: {0}")]
    Scores(String),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("writing {path}: {message}")]
    Persist { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ImportanceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Frobenius,
    Spectral,
    EntrywiseL1,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Frobenius => "frobenius",
            NormKind::Spectral => "spectral",
            NormKind::EntrywiseL1 => "entrywise_l1",
        })
    }
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frobenius" => Ok(Self::Frobenius),
            "spectral" => Ok(Self::Spectral),
            "entrywise_l1" | "l1" => Ok(Self::EntrywiseL1),
            other => Err(format!("unknown norm {other:?}")),
        }
    }
}

/// How the rows of the importance matrix are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Rows are K-dimensional draws from the fitted density.
    #[default]
    Samples,
    /// Rows are single density values `Q(s)` at standard-normal probes.
    DensityWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub norm: NormKind,
    pub invert_importance: bool,
    pub mode: SamplingMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seed: 0,
            norm: NormKind::Frobenius,
            invert_importance: false,
            mode: SamplingMode::Samples,
        }
    }
}

/// `m` sampled rows stacked into an `m x K` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl ImportanceMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.rows.first().map_or(0, Vec::len))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v * c).collect())
                .collect(),
        }
    }
}

pub fn draw_importance_matrix(model: &DensityModel, config: &SamplingConfig) -> ImportanceMatrix {
    let rows = match config.mode {
        SamplingMode::Samples => model.sample(config.batch_size, config.seed),
        SamplingMode::DensityWeights => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (0..config.batch_size)
                .map(|_| {
                    let probe: Vec<f64> = (0..model.dimension())
                        .map(|_| rng.sample(StandardNormal))
                        .collect();
                    vec![model.log_density(&probe).exp()]
                })
                .collect()
        }
    };
    ImportanceMatrix { rows }
}

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERATIONS: usize = 10_000;

fn spectral_norm(m: &ImportanceMatrix) -> Result<f64> {
    let (_, k) = m.shape();
    // Gram matrix MᵀM
    let mut gram = vec![vec![0.0; k]; k];
    for row in &m.rows {
        for i in 0..k {
            for j in 0..k {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        gram.iter()
            .map(|g| g.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Start from the Gram column with the largest norm.
    let start = (0..k)
        .max_by(|&a, &b| norm(&gram[a]).total_cmp(&norm(&gram[b])))
        .expect("k > 0");
    let mut v = gram[start].clone();
    let n0 = norm(&v);
    if n0 == 0.0 {
        return Ok(0.0);
    }
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERATIONS {
        let w = apply(&v);
        let next = norm(&w);
        if next == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / next).collect();
        if (next - lambda).abs() <= POWER_TOLERANCE * next.max(1.0) {
            return Ok(next.sqrt());
        }
        lambda = next;
    }
    Err(ImportanceError::NoConvergence(POWER_MAX_ITERATIONS))
}

pub fn matrix_norm(matrix: &ImportanceMatrix, kind: NormKind) -> Result<f64> {
    let (m, k) = matrix.shape();
    if m == 0 || k == 0 {
        return Err(ImportanceError::EmptyMatrix);
    }
    let entries = || matrix.rows.iter().flatten();
    match kind {
        NormKind::Frobenius => Ok(entries().map(|v| v * v).sum::<f64>().sqrt()),
        NormKind::EntrywiseL1 => Ok(entries().map(|v| v.abs()).sum()),
        NormKind::Spectral => spectral_norm(matrix),
    }
}

/// Everything needed to score one source view against the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub measure: Measure,
    pub normalize: bool,
    pub density: Option<DensityMethod>,
    pub bandwidth: BandwidthRule,
    pub flow: FlowConfig,
    pub sampling: SamplingConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            measure: Measure::Dtw(Default::default()),
            normalize: true,
            density: None,
            bandwidth: BandwidthRule::Silverman,
            flow: FlowConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

/// The score of one source view and the artifacts it was derived from.
#[derive(Debug, Clone)]
pub struct SourceScore {
    pub source_view: usize,
    /// `g_t`, or `1 / (1 + g_t)` when importance inversion is on.
    pub score: f64,
    /// The raw matrix norm `g_t`.
    pub norm_value: f64,
    pub norm_used: NormKind,
    pub latent: ImportanceLatentSet,
    pub model: DensityModel,
    pub matrix: ImportanceMatrix,
}

pub fn score_source_view(
    dataset: &MultiViewDataset,
    source_view: usize,
    target_view: usize,
    config: &ScoringConfig,
) -> Result<SourceScore> {
    let latent = build_latent_set(dataset, source_view, target_view, &config.measure, config.normalize)?;
    let method = select_density_method(latent.dimension, config.density);
    let model = DensityModel::fit(&latent.vectors, method, config.bandwidth, &config.flow)?;
    let matrix = draw_importance_matrix(&model, &config.sampling);
    let (norm_value, norm_used) = match matrix_norm(&matrix, config.sampling.norm) {
        Ok(v) => (v, config.sampling.norm),
        Err(ImportanceError::NoConvergence(n)) => {
            log::warn!("spectral norm did not converge in {n} iterations; using frobenius");
            (matrix_norm(&matrix, NormKind::Frobenius)?, NormKind::Frobenius)
        }
        Err(e) => return Err(e),
    };
    let score = if config.sampling.invert_importance {
        1.0 / (1.0 + norm_value)
    } else {
        norm_value
    };
    Ok(SourceScore {
        source_view,
        score,
        norm_value,
        norm_used,
        latent,
        model,
        matrix,
    })
}

impl SourceScore {
    /// Writes `latent_view_<s>.json`, `density_view_<s>.json` and
    /// `matrix_view_<s>.json` under `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let write = |name: String, json: String| {
            let path = dir.join(name);
            std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(&path, json + "\n"))
                .map_err(|e| ImportanceError::Persist {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
        };
        let s = self.source_view;
        write(format!("latent_view_{s}.json"), to_json(&self.latent))?;
        write(format!("density_view_{s}.json"), to_json(&self.model))?;
        write(format!("matrix_view_{s}.json"), to_json(&self.matrix))?;
        Ok(())
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes")
}

/// Splits `total` epochs in proportion to `|scores|` using largest-remainder
/// rounding; ties in the remainder go to the lower index. All-zero scores
/// fall back to an even split.
pub fn allocate_epochs(scores: &[f64], total: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(ImportanceError::Scores("no scores to allocate over".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(ImportanceError::Scores(format!("non-finite score {bad}")));
    }
    let magnitudes: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
    let sum: f64 = magnitudes.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        magnitudes.iter().map(|s| s / sum).collect()
    } else {
        log::warn!("all importance scores are zero; allocating epochs uniformly");
        vec![1.0 / scores.len() as f64; scores.len()]
    };
    // Snap values within 1e-9 of an integer so that rescaled scores give
    // identical floors and remainder ranks.
    const SNAP: f64 = 1e-9;
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut epochs: Vec<usize> = quotas.iter().map(|q| (q + SNAP).floor() as usize).collect();
    let assigned: usize = epochs.iter().sum();
    let mut leftover = total.saturating_sub(assigned);
    let mut order: Vec<(i64, usize)> = quotas
        .iter()
        .zip(&epochs)
        .enumerate()
        .map(|(i, (q, &e))| (-((q - e as f64).max(0.0) / SNAP).round() as i64, i))
        .collect();
    order.sort();
    for &(_, i) in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        epochs[i] += 1;
        leftover -= 1;
    }
    Ok(epochs)
}

/// Per-source-view scores and the epochs allocated to each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSchedule {
    pub target_view: usize,
    pub source_views: Vec<usize>,
    pub scores: Vec<f64>,
    pub epochs: Vec<usize>,
    pub total_epochs: usize,
}

impl TransferSchedule {
    pub fn new(target_view: usize, source_views: Vec<usize>, scores: Vec<f64>, total_epochs: usize) -> Result<Self> {
        let epochs = allocate_epochs(&scores, total_epochs)?;
        Ok(Self {
            target_view,
            source_views,
            scores,
            epochs,
            total_epochs,
        })
    }

    pub fn epochs_for(&self, view: usize) -> usize {
        self.source_views
            .iter()
            .position(|&v| v == view)
            .map_or(0, |i| self.epochs[i])
    }
}

/// The on-disk `scores.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub target_view: usize,
    pub source_views: Vec<usize>,
    pub measure: String,
    pub norm: String,
    pub invert_importance: bool,
    pub scores: Vec<f64>,
    /// Raw matrix norms before any inversion.
    pub norms: Vec<f64>,
    pub epochs: Vec<usize>,
    /// Allocation under the opposite inversion setting.
    pub alternate_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub sampling: u64,
    pub flow: u64,
}

/// Scores every non-target view in ascending order and allocates `total`
/// epochs across them.
pub fn score_all_sources(
    dataset: &MultiViewDataset,
    target_view: usize,
    config: &ScoringConfig,
    total_epochs: usize,
) -> Result<(TransferSchedule, Vec<SourceScore>, ScoresFile)> {
    let views = dataset.view_count();
    if target_view >= views {
        return Err(DistanceError::ViewOutOfRange {
            index: target_view,
            views,
        }
        .into());
    }
    let sources: Vec<usize> = (0..views).filter(|&v| v != target_view).collect();
    let results = sources
        .par_iter()
        .map(|&s| score_source_view(dataset, s, target_view, config))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let norms: Vec<f64> = results.iter().map(|r| r.norm_value).collect();
    let alternate: Vec<f64> = if config.sampling.invert_importance {
        norms.clone()
    } else {
        norms.iter().map(|g| 1.0 / (1.0 + g)).collect()
    };
    let schedule = TransferSchedule::new(target_view, sources.clone(), scores.clone(), total_epochs)?;
    let file = ScoresFile {
        target_view,
        source_views: sources,
        measure: config.measure.kind().to_string(),
        norm: config.sampling.norm.to_string(),
        invert_importance: config.sampling.invert_importance,
        scores,
        norms,
        epochs: schedule.epochs.clone(),
        alternate_epochs: allocate_epochs(&alternate, total_epochs)?,
        total_epochs,
        seeds: Seeds {
            sampling: config.sampling.seed,
            flow: config.flow.seed,
        },
    };
    Ok((schedule, results, file))
}
