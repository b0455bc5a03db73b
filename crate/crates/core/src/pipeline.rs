//! End-to-end experiment: score source views, allocate pretraining epochs,
//! pretrain sequentially, transfer, fine-tune on the target view and
//! aggregate accuracies over repeats.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    align_lengths, load_dataset, split_dataset, standardize_channels, AlignmentStrategy, DatasetError,
    MultiViewDataset, SplitSpec,
};
use crate::density::{BandwidthRule, DensityMethod, FlowConfig};
use crate::distance::{DtwParams, Measure};
use crate::importance::{score_all_sources, ImportanceError, SamplingConfig, ScoresFile, ScoringConfig, TransferSchedule};
use crate::nn::{transfer_weights, Architecture, LabeledData, Network, NetworkConfig, NnError, TrainConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("importance scoring: {0}")]
    Importance(#[from] ImportanceError),
    #[error("network: {0}")]
    Network(#[from] NnError),
    #[error("view {view} has shape {found}, target view has {expected}; weight transfer needs equal (d, m)")]
    ShapeMismatch { view: usize, found: String, expected: String },
    #[error("repeat {repeat} failed during {stage}: {source}")]
    Repeat {
        repeat: usize,
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Transfer,
    #[default]
    Both,
}

impl RunMode {
    fn runs_baseline(self) -> bool {
        matches!(self, RunMode::Baseline | RunMode::Both)
    }

    fn runs_transfer(self) -> bool {
        matches!(self, RunMode::Transfer | RunMode::Both)
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "transfer" => Ok(Self::Transfer),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Architecture choices; input shape and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub dropout_rate: f64,
    pub kernel_sizes: [usize; 3],
    pub fcn_filters: [usize; 3],
    pub mlp_hidden: Vec<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let base = NetworkConfig::new(Architecture::Fcn, 1, 1, 2);
        Self {
            arch: base.arch,
            dropout_rate: base.dropout_rate,
            kernel_sizes: base.kernel_sizes,
            fcn_filters: base.fcn_filters,
            mlp_hidden: base.mlp_hidden,
        }
    }
}

impl NetworkSpec {
    fn config(&self, channels: usize, length: usize, classes: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            arch: self.arch,
            input_channels: channels,
            input_length: length,
            class_count: classes,
            dropout_rate: self.dropout_rate,
            kernel_sizes: self.kernel_sizes,
            fcn_filters: self.fcn_filters,
            mlp_hidden: self.mlp_hidden.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset directory; relative paths resolve against the config file.
    pub dataset: PathBuf,
    pub target_view: usize,
    #[serde(default = "default_measure")]
    pub measure: Measure,
    #[serde(default = "default_true")]
    pub normalize_distances: bool,
    #[serde(default)]
    pub density: Option<DensityMethod>,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    #[serde(default)]
    pub flow: FlowConfig,
    /// `seed` is replaced by the per-repeat sampling seed.
    #[serde(default)]
    pub sampling: SamplingConfig,
    /// Pretraining epochs `T` split across source views.
    pub total_epochs: usize,
    pub finetune_epochs: usize,
    #[serde(default)]
    pub network: NetworkSpec,
    /// `seed` is replaced by per-repeat, per-phase seeds.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default = "default_alignment")]
    pub alignment: AlignmentStrategy,
    #[serde(default)]
    pub standardize: bool,
    /// Replace every computed schedule with zeros.
    #[serde(default)]
    pub force_zero_schedule: bool,
    /// Pretrain source views in a seeded random order instead of ascending.
    #[serde(default)]
    pub shuffle_view_order: bool,
}

fn default_measure() -> Measure {
    Measure::Dtw(DtwParams::default())
}
fn default_true() -> bool {
    true
}
fn default_repeats() -> usize {
    5
}
fn default_split() -> SplitSpec {
    SplitSpec::Fraction {
        train_fraction: 0.7,
        seed: 0,
    }
}
fn default_alignment() -> AlignmentStrategy {
    AlignmentStrategy::ZeroPadToMax
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>, target_view: usize, total_epochs: usize, finetune_epochs: usize) -> Self {
        Self {
            dataset: dataset.into(),
            target_view,
            measure: default_measure(),
            normalize_distances: true,
            density: None,
            bandwidth: BandwidthRule::default(),
            flow: FlowConfig::default(),
            sampling: SamplingConfig::default(),
            total_epochs,
            finetune_epochs,
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            repeats: default_repeats(),
            base_seed: 0,
            mode: RunMode::Both,
            split: default_split(),
            alignment: default_alignment(),
            standardize: false,
            force_zero_schedule: false,
            shuffle_view_order: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let mut config: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if config.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset = dir.join(&config.dataset);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(PipelineError::Config("repeats must be at least 1".into()));
        }
        if self.sampling.batch_size == 0 {
            return Err(PipelineError::Config("sampling batch_size must be at least 1".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    fn scoring(&self, seeds: &RepeatSeeds) -> ScoringConfig {
        ScoringConfig {
            measure: self.measure,
            normalize: self.normalize_distances,
            density: self.density,
            bandwidth: self.bandwidth,
            flow: FlowConfig {
                seed: seeds.flow,
                ..self.flow
            },
            sampling: SamplingConfig {
                seed: seeds.sampling,
                ..self.sampling
            },
        }
    }
}

/// Seeds for one repeat, all at fixed offsets from `base_seed + repeat`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub repeat: usize,
    pub repeat_seed: u64,
    pub sampling: u64,
    pub flow: u64,
    pub init: u64,
    pub view_order: u64,
    pub finetune: u64,
    /// Indexed by view; the target view's entry is unused.
    pub pretrain: Vec<u64>,
}

impl RepeatSeeds {
    pub fn derive(base_seed: u64, repeat: usize, views: usize) -> Self {
        let s = base_seed.wrapping_add(repeat as u64);
        let at = |offset: u64| s.wrapping_add(offset);
        Self {
            repeat,
            repeat_seed: s,
            sampling: at(1_000),
            flow: at(2_000),
            init: at(3_000),
            view_order: at(4_000),
            finetune: at(5_000),
            pretrain: (0..views as u64).map(|v| at(10_000 + v)).collect(),
        }
    }
}

/// Aligned, optionally standardized and split data, validated for weight
/// transfer across views.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
    pub channels: usize,
    pub length: usize,
}

impl PreparedData {
    fn labeled(ds: &MultiViewDataset, view: usize) -> Result<LabeledData> {
        Ok(LabeledData::from_view(ds.view(view), ds.labels())?)
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let raw = load_dataset(&config.dataset)?;
    prepare_loaded(config, &raw)
}

pub fn prepare_loaded(config: &ExperimentConfig, raw: &MultiViewDataset) -> Result<PreparedData> {
    if config.target_view >= raw.view_count() {
        return Err(PipelineError::Config(format!(
            "target view {} out of range for {} views",
            config.target_view,
            raw.view_count()
        )));
    }
    let mut ds = align_lengths(raw, config.alignment)?;
    if config.standardize {
        ds = standardize_channels(&ds);
    }
    let target = ds.view(config.target_view);
    let shape = |v: &crate::dataset::View| (v.channel_count(), v.common_length().unwrap_or(0));
    let expected = shape(target);
    for (v, view) in ds.views().iter().enumerate() {
        if shape(view) != expected {
            return Err(PipelineError::ShapeMismatch {
                view: v,
                found: format!("{:?}", shape(view)),
                expected: format!("{expected:?}"),
            });
        }
    }
    let (train, test) = split_dataset(&ds, &config.split)?;
    Ok(PreparedData {
        train,
        test,
        channels: expected.0,
        length: expected.1,
    })
}

/// Scores and schedule for one repeat, computed on the training split.
pub fn schedule_for_repeat(
    config: &ExperimentConfig,
    data: &PreparedData,
    seeds: &RepeatSeeds,
) -> Result<(TransferSchedule, ScoresFile)> {
    let (mut schedule, _, mut file) =
        score_all_sources(&data.train, config.target_view, &config.scoring(seeds), config.total_epochs)?;
    if config.force_zero_schedule {
        schedule.epochs.iter_mut().for_each(|e| *e = 0);
        file.epochs = schedule.epochs.clone();
    }
    Ok((schedule, file))
}

/// Schedule under the seeds of repeat 0.
pub fn compute_schedule(config: &ExperimentConfig) -> Result<(TransferSchedule, ScoresFile)> {
    config.validate()?;
    let data = prepare_data(config)?;
    let seeds = RepeatSeeds::derive(config.base_seed, 0, data.train.view_count());
    schedule_for_repeat(config, &data, &seeds)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(io_error(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: String,
    pub repeat: usize,
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    /// Target-view test accuracy after this epoch.
    pub accuracy: f64,
}

/// One trained network and the per-epoch log that produced it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub accuracy: f64,
    pub network: Network,
    pub curves: Vec<CurveRow>,
}

fn phase_rows(
    mode: &str,
    repeat: usize,
    phase: &str,
    offset: usize,
    log: &[crate::nn::EpochLog],
) -> Vec<CurveRow> {
    log.iter()
        .map(|e| CurveRow {
            mode: mode.to_string(),
            repeat,
            epoch: offset + e.epoch,
            phase: phase.to_string(),
            loss: e.loss,
            accuracy: e.val_accuracy.expect("validated every epoch"),
        })
        .collect()
}

fn fresh_network(config: &ExperimentConfig, data: &PreparedData, seeds: &RepeatSeeds) -> Result<Network> {
    let cfg = config
        .network
        .config(data.channels, data.length, data.train.class_count(), seeds.init);
    Ok(Network::new(cfg)?)
}

fn finetune(
    mut net: Network,
    config: &ExperimentConfig,
    data: &PreparedData,
    seeds: &RepeatSeeds,
    mode: &str,
    offset: usize,
) -> Result<RunOutcome> {
    let train = PreparedData::labeled(&data.train, config.target_view)?;
    let test = PreparedData::labeled(&data.test, config.target_view)?;
    let tc = TrainConfig {
        seed: seeds.finetune,
        ..config.train.clone()
    };
    let log = net.train(&train, &tc, config.finetune_epochs, Some(&test))?;
    let accuracy = net.evaluate(&test)?;
    Ok(RunOutcome {
        accuracy,
        curves: phase_rows(mode, seeds.repeat, "finetune", offset, &log),
        network: net,
    })
}

/// Target-only training for the fine-tune budget, from the same initial
/// weights the transfer run starts from.
pub fn run_baseline(config: &ExperimentConfig, data: &PreparedData, seeds: &RepeatSeeds) -> Result<RunOutcome> {
    let net = fresh_network(config, data, seeds)?;
    finetune(net, config, data, seeds, "baseline", 0)
}

/// Source views in pretraining order.
pub fn pretrain_order(config: &ExperimentConfig, schedule: &TransferSchedule, seeds: &RepeatSeeds) -> Vec<usize> {
    let mut order = schedule.source_views.clone();
    if config.shuffle_view_order {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.view_order));
    }
    order
}

/// Pretrains one network on each source view for its allocated epochs,
/// transfers the weights and fine-tunes on the target view.
pub fn run_transfer(
    config: &ExperimentConfig,
    data: &PreparedData,
    schedule: &TransferSchedule,
    seeds: &RepeatSeeds,
) -> Result<RunOutcome> {
    let test = PreparedData::labeled(&data.test, config.target_view)?;
    let mut net = fresh_network(config, data, seeds)?;
    let mut curves = Vec::new();
    let mut offset = 0;
    for view in pretrain_order(config, schedule, seeds) {
        let epochs = schedule.epochs_for(view);
        let train = PreparedData::labeled(&data.train, view)?;
        let tc = TrainConfig {
            seed: seeds.pretrain[view],
            ..config.train.clone()
        };
        let log = net.train(&train, &tc, epochs, Some(&test))?;
        curves.extend(phase_rows("transfer", seeds.repeat, &format!("pretrain_view_{view}"), offset, &log));
        offset += log.len();
    }
    let target = fresh_network(config, data, seeds)?;
    let transferred = transfer_weights(&net, &target)?;
    let mut outcome = finetune(transferred, config, data, seeds, "transfer", offset)?;
    curves.append(&mut outcome.curves);
    outcome.curves = curves;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

impl ModeSummary {
    fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Self { accuracies, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSchedule {
    pub repeat: usize,
    pub source_views: Vec<usize>,
    pub pretrain_order: Vec<usize>,
    pub scores: Vec<f64>,
    pub norms: Vec<f64>,
    pub epochs: Vec<usize>,
    /// Allocation under the opposite `invert_importance` setting.
    pub alternate_epochs: Vec<usize>,
}

/// Everything deterministic about an experiment; wall-clock times are kept
/// apart in [`Timing`] so that identical configs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub target_view: usize,
    pub mode: RunMode,
    pub repeats: usize,
    pub measure: String,
    pub invert_importance: bool,
    pub total_epochs: usize,
    pub finetune_epochs: usize,
    pub baseline: Option<ModeSummary>,
    pub transfer: Option<ModeSummary>,
    pub schedules: Vec<RepeatSchedule>,
    pub seeds: Vec<RepeatSeeds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub repeat: usize,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: ExperimentReport,
    pub curves: Vec<CurveRow>,
    pub timings: Vec<Timing>,
}

struct RepeatResult {
    baseline: Option<f64>,
    transfer: Option<f64>,
    schedule: Option<RepeatSchedule>,
    seeds: RepeatSeeds,
    curves: Vec<CurveRow>,
    timings: Vec<Timing>,
}

fn in_repeat<T>(repeat: usize, stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| PipelineError::Repeat {
        repeat,
        stage,
        source: Box::new(e),
    })
}

fn run_repeat(config: &ExperimentConfig, data: &PreparedData, repeat: usize) -> Result<RepeatResult> {
    let seeds = RepeatSeeds::derive(config.base_seed, repeat, data.train.view_count());
    let mut curves = Vec::new();
    let mut timings = Vec::new();
    let mut timed = |stage: &str, start: Instant| {
        timings.push(Timing {
            repeat,
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let mut baseline = None;
    if config.mode.runs_baseline() {
        let start = Instant::now();
        let out = in_repeat(repeat, "baseline", run_baseline(config, data, &seeds))?;
        timed("baseline", start);
        baseline = Some(out.accuracy);
        curves.extend(out.curves);
    }
    let (mut transfer, mut schedule_record) = (None, None);
    if config.mode.runs_transfer() {
        let start = Instant::now();
        let (schedule, file) = in_repeat(repeat, "scoring", schedule_for_repeat(config, data, &seeds))?;
        timed("scoring", start);
        let start = Instant::now();
        let out = in_repeat(repeat, "transfer", run_transfer(config, data, &schedule, &seeds))?;
        timed("transfer", start);
        transfer = Some(out.accuracy);
        curves.extend(out.curves);
        schedule_record = Some(RepeatSchedule {
            repeat,
            pretrain_order: pretrain_order(config, &schedule, &seeds),
            source_views: schedule.source_views,
            scores: file.scores,
            norms: file.norms,
            epochs: schedule.epochs,
            alternate_epochs: file.alternate_epochs,
        });
    }
    Ok(RepeatResult {
        baseline,
        transfer,
        schedule: schedule_record,
        seeds,
        curves,
        timings,
    })
}

/// Runs every repeat (in parallel) and merges results in repeat order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_prepared(config, &data)
}

pub fn run_prepared(config: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentResult> {
    config.validate()?;
    let results: Vec<RepeatResult> = (0..config.repeats)
        .into_par_iter()
        .map(|r| run_repeat(config, data, r))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let mut curves = Vec::new();
    let mut timings = Vec::new();
    let (mut base, mut trans, mut schedules, mut seeds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in results {
        base.extend(r.baseline);
        trans.extend(r.transfer);
        schedules.extend(r.schedule);
        seeds.push(r.seeds);
        curves.extend(r.curves);
        timings.extend(r.timings);
    }
    let summary = |acc: Vec<f64>| (!acc.is_empty()).then(|| ModeSummary::from_accuracies(acc));
    let report = ExperimentReport {
        target_view: config.target_view,
        mode: config.mode,
        repeats: config.repeats,
        measure: config.measure.kind().to_string(),
        invert_importance: config.sampling.invert_importance,
        total_epochs: config.total_epochs,
        finetune_epochs: config.finetune_epochs,
        baseline: summary(base),
        transfer: summary(trans),
        schedules,
        seeds,
    };
    Ok(ExperimentResult {
        report,
        curves,
        timings,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const TIMINGS_FILE: &str = "timings.json";

impl ExperimentResult {
    /// Writes `report.json`, `curves.csv` and `timings.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        write_json(&self.report, &dir.join(REPORT_FILE))?;
        write_json(&self.timings, &dir.join(TIMINGS_FILE))?;
        let path = dir.join(CURVES_FILE);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for row in &self.curves {
            writer.serialize(row).map_err(|e| PipelineError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        writer.flush().map_err(io_error(&path))
    }
}
