//! Multi-view multivariate time series: in-memory model, on-disk format,
//! length alignment and train/test splitting.
//!
//! A dataset directory holds a `manifest.json` and one long-format CSV per
//! view (`sample_id,channel,t,value`). Sample order is manifest order and is
//! shared by every view.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    View { path: PathBuf, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("split failed: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// A `d × m` multivariate series stored channel by channel.
///
/// Every channel has the same non-zero length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    channels: Vec<Vec<f64>>,
}

impl MultivariateSeries {
    pub fn new(channels: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(DatasetError::Invalid("series has no channels".into()));
        };
        let len = first.len();
        if len == 0 {
            return Err(DatasetError::Invalid("series has zero length".into()));
        }
        if let Some((k, c)) = channels.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(DatasetError::Invalid(format!(
                "channel {k} has length {} but channel 0 has length {len}",
                c.len()
            )));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("series contains a non-finite value".into()));
        }
        Ok(Self { channels })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.channels[k]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            channels: self.channels.iter().map(|c| f(c)).collect(),
        }
    }
}

/// One view: `N` samples sharing a channel count. Lengths may differ until
/// [`align_lengths`] has been applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    samples: Vec<MultivariateSeries>,
}

impl View {
    pub fn new(samples: Vec<MultivariateSeries>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(DatasetError::Invalid("view has no samples".into()));
        };
        let d = first.channel_count();
        if let Some(i) = samples.iter().position(|s| s.channel_count() != d) {
            return Err(DatasetError::Invalid(format!(
                "sample {i} has {} channels, expected {d}",
                samples[i].channel_count()
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[MultivariateSeries] {
        &self.samples
    }

    pub fn channel_count(&self) -> usize {
        self.samples[0].channel_count()
    }

    /// The shared sample length, if every sample has the same length.
    pub fn common_length(&self) -> Option<usize> {
        let m = self.samples[0].len();
        self.samples.iter().all(|s| s.len() == m).then_some(m)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.samples.iter().map(MultivariateSeries::len).collect()
    }

    /// Stacks the samples into an `(N, d, m)` tensor. Requires aligned lengths.
    pub fn to_tensor(&self) -> Result<Array3<f64>> {
        let m = self.common_length().ok_or_else(|| {
            DatasetError::Invalid("view samples have unequal lengths; align first".into())
        })?;
        let d = self.channel_count();
        let mut out = Array3::zeros((self.samples.len(), d, m));
        for (i, s) in self.samples.iter().enumerate() {
            for (k, c) in s.channels().iter().enumerate() {
                for (t, &v) in c.iter().enumerate() {
                    out[[i, k, t]] = v;
                }
            }
        }
        Ok(out)
    }
}

/// Labeled multi-view dataset. Labels, ids and optional group ids are indexed
/// like the samples of every view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewDataset {
    views: Vec<View>,
    sample_ids: Vec<String>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    groups: Option<Vec<String>>,
}

impl MultiViewDataset {
    /// Builds a dataset from per-sample label strings. Class indices follow
    /// the sorted order of the distinct label strings.
    pub fn new(
        views: Vec<View>,
        sample_ids: Vec<String>,
        labels: Vec<String>,
        groups: Option<Vec<String>>,
    ) -> Result<Self> {
        let class_names: Vec<String> = labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let labels = labels.iter().map(|l| index[l.as_str()]).collect();
        Self::with_class_indices(views, sample_ids, labels, class_names, groups)
    }

    pub fn with_class_indices(
        views: Vec<View>,
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        groups: Option<Vec<String>>,
    ) -> Result<Self> {
        let ds = Self {
            views,
            sample_ids,
            labels,
            class_names,
            groups,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if self.views.len() < 2 {
            return Err(DatasetError::Invalid(format!(
                "need at least 2 views, found {}",
                self.views.len()
            )));
        }
        if self.class_names.len() < 2 {
            return Err(DatasetError::Invalid(format!(
                "need at least 2 classes, found {}",
                self.class_names.len()
            )));
        }
        if self.labels.len() != n {
            return Err(DatasetError::Invalid(format!(
                "{} labels for {n} samples",
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(DatasetError::Invalid(format!("label index {l} out of range")));
        }
        let unique: BTreeSet<&String> = self.sample_ids.iter().collect();
        if unique.len() != n {
            return Err(DatasetError::Invalid("sample ids are not unique".into()));
        }
        for (v, view) in self.views.iter().enumerate() {
            if view.samples.len() != n {
                return Err(DatasetError::Invalid(format!(
                    "view {v} holds {} samples, expected {n}",
                    view.samples.len()
                )));
            }
        }
        if let Some(g) = &self.groups {
            if g.len() != n {
                return Err(DatasetError::Invalid(format!(
                    "{} group ids for {n} samples",
                    g.len()
                )));
            }
        }
        Ok(())
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn view(&self, v: usize) -> &View {
        &self.views[v]
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn groups(&self) -> Option<&[String]> {
        self.groups.as_deref()
    }

    pub fn set_groups(&mut self, groups: Vec<String>) -> Result<()> {
        if groups.len() != self.sample_count() {
            return Err(DatasetError::Invalid(format!(
                "{} group ids for {} samples",
                groups.len(),
                self.sample_count()
            )));
        }
        self.groups = Some(groups);
        Ok(())
    }

    /// Restricts every view (and the label/id/group columns) to `indices`,
    /// in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |xs: &[String]| indices.iter().map(|&i| xs[i].clone()).collect::<Vec<_>>();
        Self {
            views: self
                .views
                .iter()
                .map(|v| View {
                    samples: indices.iter().map(|&i| v.samples[i].clone()).collect(),
                })
                .collect(),
            sample_ids: pick(&self.sample_ids),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            groups: self.groups.as_deref().map(pick),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct Manifest {
    views: usize,
    samples: Vec<String>,
    labels: BTreeMap<String, String>,
    view_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Deserialize)]
struct Observation {
    sample_id: String,
    channel: usize,
    t: usize,
    value: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads a dataset directory (manifest plus per-view long-format CSVs).
pub fn load_dataset(root: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let root = root.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|source| DatasetError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    let bad_manifest = |message: String| DatasetError::Manifest {
        path: manifest_path.clone(),
        message,
    };
    if manifest.view_files.len() != manifest.views {
        return Err(bad_manifest(format!(
            "\"views\" is {} but {} view files are listed",
            manifest.views,
            manifest.view_files.len()
        )));
    }
    let position: HashMap<&str, usize> = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if position.len() != manifest.samples.len() {
        return Err(bad_manifest("duplicate sample id in \"samples\"".into()));
    }
    if let Some(unknown) = manifest.labels.keys().find(|k| !position.contains_key(k.as_str())) {
        return Err(bad_manifest(format!("label for unknown sample id {unknown:?}")));
    }
    let labels = manifest
        .samples
        .iter()
        .map(|s| {
            manifest
                .labels
                .get(s)
                .cloned()
                .ok_or_else(|| bad_manifest(format!("sample {s:?} has no label")))
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = match &manifest.groups {
        None => None,
        Some(map) => {
            if let Some(unknown) = map.keys().find(|k| !position.contains_key(k.as_str())) {
                return Err(bad_manifest(format!("group for unknown sample id {unknown:?}")));
            }
            Some(
                manifest
                    .samples
                    .iter()
                    .map(|s| {
                        map.get(s)
                            .cloned()
                            .ok_or_else(|| bad_manifest(format!("sample {s:?} has no group")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };

    let views = manifest
        .view_files
        .iter()
        .map(|f| load_view(&root.join(f), &position))
        .collect::<Result<Vec<_>>>()?;
    MultiViewDataset::new(views, manifest.samples.clone(), labels, groups)
}

fn load_view(path: &Path, position: &HashMap<&str, usize>) -> Result<View> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DatasetError::View {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    // (sample, channel) -> t -> value
    let mut cells: Vec<BTreeMap<usize, BTreeMap<usize, f64>>> = vec![BTreeMap::new(); position.len()];
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::View {
            path: path.to_owned(),
            message: e.to_string(),
        })?
        .clone();
    for record in reader.records() {
        let row_err = |line: u64, message: String| DatasetError::Row {
            path: path.to_owned(),
            line,
            message,
        };
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let obs: Observation = record
            .deserialize(Some(&headers))
            .map_err(|e| row_err(line, e.to_string()))?;
        if !obs.value.is_finite() {
            return Err(row_err(
                line,
                format!("non-finite value for sample {:?}", obs.sample_id),
            ));
        }
        let Some(&i) = position.get(obs.sample_id.as_str()) else {
            return Err(row_err(line, format!("unknown sample id {:?}", obs.sample_id)));
        };
        let previous = cells[i]
            .entry(obs.channel)
            .or_default()
            .insert(obs.t, obs.value);
        if previous.is_some() {
            return Err(row_err(
                line,
                format!(
                    "duplicate observation ({}, {}, {})",
                    obs.sample_id, obs.channel, obs.t
                ),
            ));
        }
    }

    let ids: BTreeMap<usize, &str> = position.iter().map(|(s, &i)| (i, *s)).collect();
    let view_err = |message: String| DatasetError::View {
        path: path.to_owned(),
        message,
    };
    let mut samples = Vec::with_capacity(cells.len());
    for (i, channels) in cells.into_iter().enumerate() {
        let id = ids[&i];
        if channels.is_empty() {
            return Err(view_err(format!("sample {id:?} has no observations")));
        }
        let mut series = Vec::with_capacity(channels.len());
        for (expected, (k, values)) in channels.into_iter().enumerate() {
            if k != expected {
                return Err(view_err(format!("sample {id:?} is missing channel {expected}")));
            }
            if let Some((expected_t, _)) = values.keys().enumerate().find(|(e, t)| *e != **t) {
                return Err(view_err(format!(
                    "sample {id:?} channel {k} is missing t={expected_t}"
                )));
            }
            series.push(values.into_values().collect());
        }
        let s = MultivariateSeries::new(series)
            .map_err(|e| view_err(format!("sample {id:?}: {e}")))?;
        samples.push(s);
    }
    View::new(samples).map_err(|e| view_err(e.to_string()))
}

/// Writes `dataset` in the on-disk format read by [`load_dataset`]. Floats
/// use the shortest representation that round-trips exactly.
pub fn emit_dataset(dataset: &MultiViewDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(root).map_err(io(root))?;
    let view_files: Vec<String> = (0..dataset.view_count())
        .map(|v| format!("view_{v}.csv"))
        .collect();
    let manifest = Manifest {
        views: dataset.view_count(),
        samples: dataset.sample_ids.clone(),
        labels: dataset
            .sample_ids
            .iter()
            .zip(&dataset.labels)
            .map(|(s, &l)| (s.clone(), dataset.class_names[l].clone()))
            .collect(),
        view_files: view_files.clone(),
        groups: dataset.groups.as_ref().map(|g| {
            dataset
                .sample_ids
                .iter()
                .cloned()
                .zip(g.iter().cloned())
                .collect()
        }),
    };
    let manifest_path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io(&manifest_path))?;

    for (view, file) in dataset.views.iter().zip(&view_files) {
        let path = root.join(file);
        let mut out = String::from("sample_id,channel,t,value\n");
        for (id, sample) in dataset.sample_ids.iter().zip(&view.samples) {
            for (k, channel) in sample.channels().iter().enumerate() {
                for (t, v) in channel.iter().enumerate() {
                    out.push_str(&format!("{id},{k},{t},{v:?}\n"));
                }
            }
        }
        fs::write(&path, out).map_err(io(&path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentStrategy {
    ZeroPadToMax,
    LastValuePadToMax,
    TruncateToMin,
    AverageLength,
}

impl std::str::FromStr for AlignmentStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero-pad-to-max" => Ok(Self::ZeroPadToMax),
            "last-value-pad-to-max" => Ok(Self::LastValuePadToMax),
            "truncate-to-min" => Ok(Self::TruncateToMin),
            "average-length" => Ok(Self::AverageLength),
            other => Err(format!("unknown alignment strategy {other:?}")),
        }
    }
}

/// Brings every sample of each view to one length. Views are aligned
/// independently; the average-length target is the per-view mean rounded half
/// up, with shorter series zero-padded.
pub fn align_lengths(dataset: &MultiViewDataset, strategy: AlignmentStrategy) -> Result<MultiViewDataset> {
    let mut out = dataset.clone();
    for (v, view) in out.views.iter_mut().enumerate() {
        let lengths = view.lengths();
        let max = *lengths.iter().max().expect("views are non-empty");
        let min = *lengths.iter().min().expect("views are non-empty");
        let (target, fill): (usize, fn(&[f64]) -> f64) = match strategy {
            AlignmentStrategy::ZeroPadToMax => (max, |_| 0.0),
            AlignmentStrategy::LastValuePadToMax => (max, |c| c[c.len() - 1]),
            AlignmentStrategy::TruncateToMin => {
                if min == 0 {
                    return Err(DatasetError::Alignment(format!(
                        "view {v} has a zero-length series; cannot truncate to it"
                    )));
                }
                (min, |_| 0.0)
            }
            AlignmentStrategy::AverageLength => {
                let n = lengths.len();
                let total: usize = lengths.iter().sum();
                // floor(total / n + 1/2)
                ((2 * total + n) / (2 * n), |_| 0.0)
            }
        };
        for sample in &mut view.samples {
            *sample = sample.map_channels(|c| {
                let mut c2: Vec<f64> = c.iter().copied().take(target).collect();
                let pad = fill(c);
                c2.resize(target, pad);
                c2
            });
        }
    }
    Ok(out)
}

/// Per-channel z-scoring within each view, using statistics pooled over all
/// samples and timestamps. Constant channels are only centred.
pub fn standardize_channels(dataset: &MultiViewDataset) -> MultiViewDataset {
    let mut out = dataset.clone();
    for view in &mut out.views {
        for k in 0..view.channel_count() {
            let values = view.samples.iter().flat_map(|s| s.channel(k).iter().copied());
            let (count, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
            let mean = sum / count as f64;
            let var = view
                .samples
                .iter()
                .flat_map(|s| s.channel(k).iter())
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / count as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for s in &mut view.samples {
                for v in &mut s.channels[k] {
                    *v = (*v - mean) / sd;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// Random split with `round(N * train_fraction)` training samples.
    Fraction { train_fraction: f64, seed: u64 },
    /// Samples whose group id is in `train_groups` train, the rest test.
    /// Uses `assignment` when given, else the dataset's own group ids.
    ByGroup {
        train_groups: BTreeSet<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        assignment: Option<BTreeMap<String, String>>,
    },
}

/// Partitions the samples of every view identically. Both partitions keep
/// the original sample order.
pub fn split_dataset(
    dataset: &MultiViewDataset,
    spec: &SplitSpec,
) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let n = dataset.sample_count();
    let is_train: Vec<bool> = match spec {
        SplitSpec::Fraction { train_fraction, seed } => {
            if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                return Err(DatasetError::Split(format!(
                    "train_fraction {train_fraction} is not in (0, 1)"
                )));
            }
            let n_train = (n as f64 * train_fraction).round() as usize;
            if n_train == 0 || n_train == n {
                return Err(DatasetError::Split(format!(
                    "fraction {train_fraction} of {n} samples leaves an empty partition"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let mut mask = vec![false; n];
            for &i in &order[..n_train] {
                mask[i] = true;
            }
            mask
        }
        SplitSpec::ByGroup {
            train_groups,
            assignment,
        } => {
            let groups: Vec<String> = match assignment {
                Some(map) => dataset
                    .sample_ids
                    .iter()
                    .map(|s| {
                        map.get(s).cloned().ok_or_else(|| {
                            DatasetError::Split(format!("sample {s:?} has no group assignment"))
                        })
                    })
                    .collect::<Result<_>>()?,
                None => dataset
                    .groups
                    .clone()
                    .ok_or_else(|| DatasetError::Split("dataset has no group ids".into()))?,
            };
            let present: BTreeSet<&String> = groups.iter().collect();
            if let Some(g) = train_groups.iter().find(|g| !present.contains(g)) {
                return Err(DatasetError::Split(format!("group {g:?} has no samples")));
            }
            groups.iter().map(|g| train_groups.contains(g)).collect()
        }
    };
    let train: Vec<usize> = (0..n).filter(|&i| is_train[i]).collect();
    let test: Vec<usize> = (0..n).filter(|&i| !is_train[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(DatasetError::Split(format!(
            "empty partition ({} train, {} test)",
            train.len(),
            test.len()
        )));
    }
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
