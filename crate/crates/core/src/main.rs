use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{CommandFactory, Parser, Subcommand};

use viewtransfer::dataset::{align_lengths, emit_dataset, load_dataset, AlignmentStrategy, MultiViewDataset};
use viewtransfer::density::{DensityError, DensityMethod, DensityModel, GridSpec, evaluate_grid, write_grid_csv};
use viewtransfer::distance::{DtwParams, Measure, MeasureKind};
use viewtransfer::importance::{score_all_sources, NormKind, SamplingConfig, ScoringConfig};
use viewtransfer::pipeline::{compute_schedule, run_experiment, write_json, ExperimentConfig, RunMode};
use viewtransfer::synthetic::{correlated_views, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(name = "viewtransfer", version, about = "Importance-scheduled transfer learning across views of multivariate time series")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every source view against the target and allocate epochs.
    Importance(ImportanceArgs),
    /// Compute the schedule an experiment config would use for repeat 0.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run baseline and/or transfer training over all repeats.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<RunMode>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate a saved density model on a 1-D or 2-D grid.
    DensityGrid(GridArgs),
    /// Load a dataset, check it and print a summary.
    ValidateDataset {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        alignment: Option<AlignmentStrategy>,
    },
    /// Write a seeded multi-view dataset with a correlated and a noise view.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 120)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        length: usize,
        /// 3 for target, correlated and noise views; 2 drops the noise view.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=3))]
        views: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, clap::Args)]
struct ImportanceArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    target_view: usize,
    #[arg(long)]
    measure: MeasureKind,
    /// Sakoe-Chiba band radius for DTW.
    #[arg(long)]
    band_radius: Option<usize>,
    #[arg(long)]
    density: Option<DensityMethod>,
    #[arg(long, default_value = "frobenius")]
    norm: NormKind,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score with 1 / (1 + g) so that closer views receive more epochs.
    #[arg(long)]
    invert: bool,
    #[arg(long, default_value_t = 100)]
    total_epochs: usize,
    #[arg(long, default_value = "zero-pad-to-max")]
    alignment: AlignmentStrategy,
    /// Keep raw distances instead of dividing by series length.
    #[arg(long)]
    raw_distances: bool,
    /// Also write latent sets, density models and sample matrices.
    #[arg(long)]
    save_artifacts: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct GridArgs {
    /// JSON density model, as written by `importance --save-artifacts`.
    #[arg(long)]
    model: PathBuf,
    /// Lower bound per grid axis.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    lower: Vec<f64>,
    /// Upper bound per grid axis.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    upper: Vec<f64>,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Model coordinates to grid over; required when the model has more
    /// than two dimensions.
    #[arg(long, value_delimiter = ',')]
    project: Option<Vec<usize>>,
    /// Values for the coordinates not on the grid; defaults to the model centre.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    anchor: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

/// Usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(message.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Importance(args) => cmd_importance(args),
        Command::Schedule { config, out } => cmd_schedule(&config, &out),
        Command::Train {
            config,
            mode,
            repeats,
            seed,
            out,
        } => cmd_train(&config, mode, repeats, seed, &out),
        Command::DensityGrid(args) => cmd_density_grid(args),
        Command::ValidateDataset { dataset, alignment } => cmd_validate(&dataset, alignment),
        Command::GenerateSynthetic {
            out,
            samples,
            channels,
            length,
            views,
            seed,
        } => {
            let spec = SyntheticSpec {
                samples,
                channels,
                length,
                seed,
                ..SyntheticSpec::default()
            };
            let mut ds = correlated_views(&spec).context("generating dataset")?;
            if views == 2 {
                ds = keep_views(&ds, &[0, 1])?;
            }
            emit_dataset(&ds, &out).context("writing dataset")?;
            Ok(())
        }
    }
}

fn keep_views(ds: &MultiViewDataset, keep: &[usize]) -> anyhow::Result<MultiViewDataset> {
    let views = keep.iter().map(|&v| ds.view(v).clone()).collect();
    let labels = ds.labels().iter().map(|&l| ds.class_names()[l].clone()).collect();
    Ok(MultiViewDataset::new(views, ds.sample_ids().to_vec(), labels, None)?)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn cmd_importance(args: ImportanceArgs) -> Outcome {
    if args.batch_size == 0 {
        return usage("--batch-size must be at least 1");
    }
    let raw = load_dataset(&args.dataset).context("loading dataset")?;
    if args.target_view >= raw.view_count() {
        return usage(format!(
            "--target-view {} is out of range; the dataset has {} views",
            args.target_view,
            raw.view_count()
        ));
    }
    let ds = align_lengths(&raw, args.alignment).context("aligning series lengths")?;
    let measure = match args.measure {
        MeasureKind::Dtw => Measure::Dtw(DtwParams {
            band_radius: args.band_radius,
        }),
        MeasureKind::Boss => Measure::Boss { sfa: None },
    };
    let config = ScoringConfig {
        measure,
        normalize: !args.raw_distances,
        density: args.density,
        sampling: SamplingConfig {
            batch_size: args.batch_size,
            seed: args.seed,
            norm: args.norm,
            invert_importance: args.invert,
            ..SamplingConfig::default()
        },
        ..ScoringConfig::default()
    };
    let (_, sources, file) =
        score_all_sources(&ds, args.target_view, &config, args.total_epochs).context("scoring source views")?;
    create_dir(&args.out)?;
    write_json(&file, &args.out.join("scores.json")).context("writing scores")?;
    if args.save_artifacts {
        for s in &sources {
            s.persist(&args.out).context("writing artifacts")?;
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return usage(format!("config file {} does not exist", path.display()));
    }
    match ExperimentConfig::load(path) {
        Ok(c) => Ok(c),
        Err(e) => usage(format!("cannot read config: {e}")),
    }
}

fn cmd_schedule(config: &Path, out: &Path) -> Outcome {
    let config = load_config(config)?;
    let (schedule, file) = compute_schedule(&config).context("computing schedule")?;
    create_dir(out)?;
    write_json(&file, &out.join("scores.json")).context("writing scores")?;
    write_json(&schedule, &out.join("schedule.json")).context("writing schedule")?;
    Ok(())
}

fn cmd_train(path: &Path, mode: Option<RunMode>, repeats: Option<usize>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut config = load_config(path)?;
    if let Some(mode) = mode {
        config.mode = mode;
    }
    if let Some(r) = repeats {
        config.repeats = r;
    }
    if let Some(s) = seed {
        config.base_seed = s;
    }
    let result = run_experiment(&config).context("running experiment")?;
    result.write(out).context("writing results")?;
    Ok(())
}

fn cmd_density_grid(args: GridArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let model: DensityModel = serde_json::from_str(&text).context("parsing density model")?;
    let d = model.dimension();
    let axes = match args.project {
        Some(axes) => axes,
        None if d <= 2 => (0..d).collect(),
        None => return usage(format!("model has dimension {d}; grids are 1-D or 2-D, pass --project")),
    };
    if args.lower.len() != axes.len() || args.upper.len() != axes.len() {
        return usage(format!("--lower and --upper need {} value(s) each", axes.len()));
    }
    let bounds: Vec<(f64, f64)> = args.lower.iter().copied().zip(args.upper.iter().copied()).collect();
    if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi)) {
        return usage(format!("grid bounds [{lo}, {hi}] are reversed or empty"));
    }
    let grid = GridSpec {
        axes,
        bounds,
        points_per_axis: args.points,
        anchor: args.anchor.unwrap_or_else(|| model.centre()),
    };
    let rows = match evaluate_grid(&model, &grid) {
        Ok(rows) => rows,
        Err(DensityError::Grid(m)) => return usage(m),
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_grid_csv(&rows, file).context("writing grid")?;
    Ok(())
}

fn cmd_validate(path: &Path, alignment: Option<AlignmentStrategy>) -> Outcome {
    let ds = load_dataset(path).context("loading dataset")?;
    let ds = match alignment {
        Some(a) => align_lengths(&ds, a).context("aligning series lengths")?,
        None => ds,
    };
    let views: Vec<serde_json::Value> = ds
        .views()
        .iter()
        .map(|v| {
            serde_json::json!({
                "channels": v.channel_count(),
                "common_length": v.common_length(),
                "min_length": v.lengths().into_iter().min(),
                "max_length": v.lengths().into_iter().max(),
            })
        })
        .collect();
    let summary = serde_json::json!({
        "samples": ds.sample_count(),
        "classes": ds.class_names(),
        "views": views,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
