//! Channel-wise distances between corresponding source- and target-view
//! samples, and the latent observation set built from them.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MultiViewDataset, MultivariateSeries};

#[derive(Debug, Error, PartialEq)]
pub enum DistanceError {
    #[error("series is empty")]
    EmptySeries,
    #[error("Sakoe-Chiba radius {radius} admits no warp path between lengths {len_x} and {len_y}")]
    InfeasibleBand {
        radius: usize,
        len_x: usize,
        len_y: usize,
    },
    #[error("invalid SFA parameters: {0}")]
    SfaParams(String),
    #[error("series of length {len} is shorter than the SFA window {window}")]
    ShortSeries { len: usize, window: usize },
    #[error("channel count mismatch: source has {source_channels}, target has {target_channels}")]
    ChannelMismatch {
        source_channels: usize,
        target_channels: usize,
    },
    #[error("view index {index} out of range for {views} views")]
    ViewOutOfRange { index: usize, views: usize },
    #[error("source and target view are both {0}")]
    SameView(usize),
    #[error("latent set needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

pub type Result<T> = std::result::Result<T, DistanceError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtwParams {
    /// Sakoe-Chiba radius; `None` means unconstrained.
    #[serde(default)]
    pub band_radius: Option<usize>,
}

/// DTW with absolute-difference local cost and the symmetric
/// (match, insertion, deletion) step pattern.
pub fn dtw_distance(x: &[f64], y: &[f64], params: &DtwParams) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(DistanceError::EmptySeries);
    }
    let (n, m) = (x.len(), y.len());
    let radius = match params.band_radius {
        Some(r) if n.abs_diff(m) > r => {
            return Err(DistanceError::InfeasibleBand {
                radius: r,
                len_x: n,
                len_y: m,
            })
        }
        Some(r) => r,
        None => n.max(m),
    };

    // Two rows of the (n+1) x (m+1) cumulative cost lattice.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr.fill(f64::INFINITY);
        let lo = i.saturating_sub(radius).max(1);
        let hi = (i + radius).min(m);
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = (x[i - 1] - y[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfaParams {
    pub window_length: usize,
    /// Number of real values kept per window (`word_length / 2` complex DFT
    /// coefficients).
    pub word_length: usize,
    pub alphabet_size: usize,
    pub mean_normalize: bool,
}

impl SfaParams {
    /// `w = max(8, ceil(m/4))` capped at `m`, `l = 4` (or the largest even
    /// value that fits the window), `a = 4`, mean normalization on.
    pub fn default_for_length(m: usize) -> Self {
        let window_length = 8usize.max(m.div_ceil(4)).min(m);
        let word_length = 4.min(window_length - window_length % 2);
        Self {
            window_length,
            word_length,
            alphabet_size: 4,
            mean_normalize: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window_length == 0 {
            return Err(DistanceError::SfaParams("window length must be positive".into()));
        }
        if self.word_length == 0 || self.word_length % 2 != 0 {
            return Err(DistanceError::SfaParams(format!(
                "word length {} must be positive and even",
                self.word_length
            )));
        }
        if self.word_length > self.window_length {
            return Err(DistanceError::SfaParams(format!(
                "word length {} exceeds window length {}",
                self.word_length, self.window_length
            )));
        }
        if self.alphabet_size < 2 {
            return Err(DistanceError::SfaParams(format!(
                "alphabet size {} is below 2",
                self.alphabet_size
            )));
        }
        Ok(())
    }

    fn first_coefficient(&self) -> usize {
        usize::from(self.mean_normalize)
    }
}

/// Truncated DFT of one window, laid out `[re_0, im_0, re_1, im_1, ...]`
/// starting at the DC term, or at the first harmonic when mean-normalizing.
fn window_coefficients(window: &[f64], params: &SfaParams) -> Vec<f64> {
    let w = window.len();
    let mean = if params.mean_normalize {
        window.iter().sum::<f64>() / w as f64
    } else {
        0.0
    };
    let first = params.first_coefficient();
    let mut out = Vec::with_capacity(params.word_length);
    for k in first..first + params.word_length / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &v) in window.iter().enumerate() {
            let angle = 2.0 * PI * (k * n) as f64 / w as f64;
            re += (v - mean) * angle.cos();
            im -= (v - mean) * angle.sin();
        }
        out.push(re);
        out.push(im);
    }
    out
}

fn sliding_coefficients<'a>(
    x: &'a [f64],
    params: &'a SfaParams,
) -> impl Iterator<Item = Vec<f64>> + 'a {
    x.windows(params.window_length)
        .map(move |w| window_coefficients(w, params))
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Multiple coefficient binning breakpoints: one row of `a - 1`
/// non-decreasing equi-depth boundaries per retained coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfaModel {
    pub params: SfaParams,
    pub breakpoints: Vec<Vec<f64>>,
}

pub fn sfa_fit<S: AsRef<[f64]>>(corpus: &[S], params: &SfaParams) -> Result<SfaModel> {
    params.validate()?;
    if corpus.is_empty() {
        return Err(DistanceError::SfaParams("empty corpus".into()));
    }
    if let Some(short) = corpus
        .iter()
        .map(|s| s.as_ref().len())
        .find(|&len| len < params.window_length)
    {
        return Err(DistanceError::ShortSeries {
            len: short,
            window: params.window_length,
        });
    }
    let mut columns = vec![Vec::new(); params.word_length];
    for series in corpus {
        for coeffs in sliding_coefficients(series.as_ref(), params) {
            for (col, v) in columns.iter_mut().zip(coeffs) {
                col.push(v);
            }
        }
    }
    let a = params.alphabet_size;
    let breakpoints = columns
        .into_iter()
        .map(|mut col| {
            col.sort_by(f64::total_cmp);
            (1..a).map(|j| quantile(&col, j as f64 / a as f64)).collect()
        })
        .collect();
    Ok(SfaModel {
        params: *params,
        breakpoints,
    })
}

pub type WordHistogram = BTreeMap<String, usize>;

impl SfaModel {
    fn symbol(&self, position: usize, value: f64) -> char {
        let s = self.breakpoints[position]
            .iter()
            .take_while(|&&b| b <= value)
            .count();
        char::from(b'a' + s as u8)
    }

    pub fn word(&self, window: &[f64]) -> String {
        window_coefficients(window, &self.params)
            .into_iter()
            .enumerate()
            .map(|(i, v)| self.symbol(i, v))
            .collect()
    }

    /// Bag of SFA words over all windows, with numerosity reduction (a run
    /// of identical consecutive words counts once).
    pub fn transform(&self, x: &[f64]) -> Result<WordHistogram> {
        let w = self.params.window_length;
        if x.len() < w {
            return Err(DistanceError::ShortSeries {
                len: x.len(),
                window: w,
            });
        }
        let mut hist = WordHistogram::new();
        let mut last: Option<String> = None;
        for window in x.windows(w) {
            let word = self.word(window);
            if last.as_ref() != Some(&word) {
                *hist.entry(word.clone()).or_insert(0) += 1;
                last = Some(word);
            }
        }
        Ok(hist)
    }
}

pub fn sfa_transform(x: &[f64], model: &SfaModel) -> Result<WordHistogram> {
    model.transform(x)
}

fn one_sided_boss(p: &WordHistogram, q: &WordHistogram) -> f64 {
    p.iter()
        .map(|(w, &c)| {
            let diff = c as f64 - q.get(w).copied().unwrap_or(0) as f64;
            diff * diff
        })
        .sum()
}

/// Symmetrized BOSS distance: the mean of both one-sided BOSS sums.
pub fn boss_distance(a: &WordHistogram, b: &WordHistogram) -> f64 {
    0.5 * (one_sided_boss(a, b) + one_sided_boss(b, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Dtw,
    Boss,
}

impl std::fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeasureKind::Dtw => "dtw",
            MeasureKind::Boss => "boss",
        })
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dtw" => Ok(Self::Dtw),
            "boss" => Ok(Self::Boss),
            other => Err(format!("unknown measure {other:?} (expected dtw or boss)")),
        }
    }
}

/// A distance measure as configured, before any corpus-dependent fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Measure {
    Dtw(DtwParams),
    /// `None` picks [`SfaParams::default_for_length`] from the data.
    Boss { sfa: Option<SfaParams> },
}

impl Measure {
    pub fn kind(&self) -> MeasureKind {
        match self {
            Measure::Dtw(_) => MeasureKind::Dtw,
            Measure::Boss { .. } => MeasureKind::Boss,
        }
    }
}

/// A measure ready to apply to series pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedMeasure {
    Dtw(DtwParams),
    Boss(SfaModel),
}

impl FittedMeasure {
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            FittedMeasure::Dtw(p) => dtw_distance(x, y, p),
            FittedMeasure::Boss(model) => {
                Ok(boss_distance(&model.transform(x)?, &model.transform(y)?))
            }
        }
    }
}

/// One `S_j`: the K per-channel distances for a sample pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub sample_id: String,
    pub components: Vec<f64>,
}

/// Per-channel distances between two samples. With `normalize`, each
/// component is divided by the mean length of the two series.
pub fn channel_pairwise_distances(
    source: &MultivariateSeries,
    target: &MultivariateSeries,
    measure: &FittedMeasure,
    normalize: bool,
) -> Result<Vec<f64>> {
    if source.channel_count() != target.channel_count() {
        return Err(DistanceError::ChannelMismatch {
            source_channels: source.channel_count(),
            target_channels: target.channel_count(),
        });
    }
    let scale = if normalize {
        2.0 / (source.len() + target.len()) as f64
    } else {
        1.0
    };
    source
        .channels()
        .iter()
        .zip(target.channels())
        .map(|(x, y)| measure.distance(x, y).map(|d| d * scale))
        .collect()
}

/// The latent observation set for one (source, target) view pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceLatentSet {
    pub measure: MeasureKind,
    pub source_view: usize,
    pub target_view: usize,
    #[serde(rename = "K")]
    pub dimension: usize,
    pub normalized: bool,
    /// One row per sample, in sample order.
    pub vectors: Vec<Vec<f64>>,
    /// The same distances before length normalization.
    pub raw_vectors: Vec<Vec<f64>>,
    pub sample_ids: Vec<String>,
}

impl ImportanceLatentSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn importance_vectors(&self) -> impl Iterator<Item = ImportanceVector> + '_ {
        self.sample_ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| ImportanceVector {
                sample_id: id.clone(),
                components: v.clone(),
            })
    }
}

/// Fits whatever the measure needs from both views. For BOSS, the MCB bins
/// are learned on every channel series of the source and target views.
pub fn fit_measure(
    dataset: &MultiViewDataset,
    source_view: usize,
    target_view: usize,
    measure: &Measure,
) -> Result<FittedMeasure> {
    match measure {
        Measure::Dtw(p) => Ok(FittedMeasure::Dtw(*p)),
        Measure::Boss { sfa } => {
            let corpus: Vec<&[f64]> = [source_view, target_view]
                .iter()
                .flat_map(|&v| dataset.view(v).samples())
                .flat_map(|s| s.channels().iter().map(Vec::as_slice))
                .collect();
            let params = match sfa {
                Some(p) => *p,
                None => {
                    let shortest = corpus.iter().map(|s| s.len()).min().unwrap_or(0);
                    SfaParams::default_for_length(shortest)
                }
            };
            Ok(FittedMeasure::Boss(sfa_fit(&corpus, &params)?))
        }
    }
}

pub fn build_latent_set(
    dataset: &MultiViewDataset,
    source_view: usize,
    target_view: usize,
    measure: &Measure,
    normalize: bool,
) -> Result<ImportanceLatentSet> {
    let views = dataset.view_count();
    for index in [source_view, target_view] {
        if index >= views {
            return Err(DistanceError::ViewOutOfRange { index, views });
        }
    }
    if source_view == target_view {
        return Err(DistanceError::SameView(source_view));
    }
    let n = dataset.sample_count();
    if n < 2 {
        return Err(DistanceError::TooFewSamples(n));
    }
    let (src, tgt) = (dataset.view(source_view), dataset.view(target_view));
    if src.channel_count() != tgt.channel_count() {
        return Err(DistanceError::ChannelMismatch {
            source_channels: src.channel_count(),
            target_channels: tgt.channel_count(),
        });
    }
    let fitted = fit_measure(dataset, source_view, target_view, measure)?;
    let raw_vectors = src
        .samples()
        .par_iter()
        .zip(tgt.samples().par_iter())
        .map(|(s, t)| channel_pairwise_distances(s, t, &fitted, false))
        .collect::<Result<Vec<_>>>()?;
    let vectors = if normalize {
        raw_vectors
            .iter()
            .zip(src.samples().iter().zip(tgt.samples()))
            .map(|(raw, (s, t))| {
                let scale = 2.0 / (s.len() + t.len()) as f64;
                raw.iter().map(|d| d * scale).collect()
            })
            .collect()
    } else {
        raw_vectors.clone()
    };
    Ok(ImportanceLatentSet {
        measure: measure.kind(),
        source_view,
        target_view,
        dimension: src.channel_count(),
        normalized: normalize,
        vectors,
        raw_vectors,
        sample_ids: dataset.sample_ids().to_vec(),
    })
}
