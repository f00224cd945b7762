//! Command-line flags, the TOML config file and their resolution.
//!
//! Each setting is taken from its flag, else from the config file, else
//! from a default. The data directory additionally falls back to the
//! `SCANN_DATA_DIR` environment variable before the default `data`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scann::data::Split;
use scann::sampler::MaskMode;
use scann::trainer::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::manifest::Seeds;

pub const DATA_DIR_ENV: &str = "SCANN_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "scann",
    version,
    about = "Train, sample and analyze Bernoulli-sampled networks"
)]
pub struct Cli {
    /// TOML file with default values for any flag (same names).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a weight-constrained network.
    Train(TrainArgs),
    /// Sample a trained network on the test split and record votes.
    Sample(SampleArgs),
    /// Train with one class partly removed, sample, and compare entropies.
    Holdout(HoldoutArgs),
    /// Confusion matrices, entropy tables and accuracy curve from a votes CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataFlags {
    /// Directory holding one subdirectory per dataset.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset subdirectory name, e.g. mnist or fashion.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// Layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub arch: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Use only the first N training items.
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct SampleFlags {
    /// Monte Carlo samples per test item.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Coin precision: `full` or a number of bits in 1..=16.
    #[arg(long)]
    pub precision: Option<Precision>,
    /// `per-input` draws fresh masks for every item, `shared` reuses them.
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
    /// Use only the first N test items.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub sample: SampleFlags,
    /// Model file written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HoldoutArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub sample: SampleFlags,
    /// Class whose training items are removed.
    #[arg(long)]
    pub holdout_class: Option<usize>,
    /// Removal fractions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Votes CSV written by `sample`.
    #[arg(long)]
    pub votes: Option<PathBuf>,
    /// Histogram bins over [0, log2(classes)].
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Keys accepted in the config file; names match the long flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub votes: Option<PathBuf>,
    pub arch: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub dropout: Option<f64>,
    pub train_limit: Option<usize>,
    pub samples: Option<usize>,
    pub precision: Option<String>,
    pub mask_mode: Option<String>,
    pub test_limit: Option<usize>,
    pub holdout_class: Option<usize>,
    pub fractions: Option<Vec<f64>>,
    pub bins: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Probability precision used when sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    Bits(u32),
}

impl Precision {
    pub fn bits(self) -> Option<u32> {
        match self {
            Precision::Full => None,
            Precision::Bits(b) => Some(b),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(Precision::Full);
        }
        match s.parse::<u32>() {
            Ok(b) if (1..=16).contains(&b) => Ok(Precision::Bits(b)),
            _ => Err(format!("precision must be `full` or bits in 1..=16, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Full => f.write_str("full"),
            Precision::Bits(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSettings {
    pub data_dir: PathBuf,
    pub dataset: String,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl DataSettings {
    pub fn dir(&self) -> PathBuf {
        self.data_dir.join(&self.dataset)
    }

    /// Fails with a usage error when a file of the split is missing.
    pub fn check(&self, split: Split) -> CliResult<()> {
        let (images, labels) = scann::data::idx_paths(self.dir(), split);
        for p in [images, labels] {
            if !p.is_file() {
                return Err(CliError::Usage(format!(
                    "dataset file not found: {} (set --data-dir, the config file or {DATA_DIR_ENV})",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub data: DataSettings,
    pub arch: Vec<usize>,
    pub train: TrainConfig,
    pub seeds: Seeds,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingSettings {
    pub samples: usize,
    pub precision: Precision,
    pub mask_mode: MaskMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSettings {
    pub data: DataSettings,
    pub model: PathBuf,
    pub sampling: SamplingSettings,
    pub seeds: Seeds,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutSettings {
    pub train: TrainSettings,
    pub sampling: SamplingSettings,
    pub holdout_class: usize,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSettings {
    pub votes: PathBuf,
    pub bins: usize,
    pub out: PathBuf,
}

pub const DEFAULT_ARCH: [usize; 3] = [784, 400, 10];
pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_HOLDOUT_CLASS: usize = 5;
pub const DEFAULT_FRACTIONS: [f64; 2] = [0.0, 0.9];
pub const DEFAULT_BINS: usize = 20;

fn required<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or config file)")))
}

fn data_settings(f: &DataFlags, c: &FileConfig, train_limit: Option<usize>, test_limit: Option<usize>) -> DataSettings {
    let data_dir = f
        .data_dir
        .clone()
        .or_else(|| c.data_dir.clone())
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    DataSettings {
        data_dir,
        dataset: f
            .dataset
            .clone()
            .or_else(|| c.dataset.clone())
            .unwrap_or_else(|| "mnist".into()),
        train_limit,
        test_limit,
    }
}

fn train_config(f: &TrainFlags, c: &FileConfig, seeds: &Seeds) -> CliResult<(Vec<usize>, TrainConfig)> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: f.epochs.or(c.epochs).unwrap_or(d.epochs),
        batch_size: f.batch_size.or(c.batch_size).unwrap_or(d.batch_size),
        learning_rate: f.learning_rate.or(c.learning_rate).unwrap_or(d.learning_rate),
        dropout_rate: f.dropout.or(c.dropout).unwrap_or(d.dropout_rate),
        seed: seeds.train,
        ..d
    };
    cfg.validate()?;
    let arch = f
        .arch
        .clone()
        .or_else(|| c.arch.clone())
        .unwrap_or_else(|| DEFAULT_ARCH.to_vec());
    Ok((arch, cfg))
}

fn sampling_settings(f: &SampleFlags, c: &FileConfig) -> CliResult<SamplingSettings> {
    let precision = match (f.precision, &c.precision) {
        (Some(p), _) => p,
        (None, Some(s)) => s.parse().map_err(CliError::Usage)?,
        (None, None) => Precision::Full,
    };
    let mask_mode = match (f.mask_mode, &c.mask_mode) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse().map_err(CliError::Usage)?,
        (None, None) => MaskMode::PerInput,
    };
    let samples = f.samples.or(c.samples).unwrap_or(DEFAULT_SAMPLES);
    if samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    Ok(SamplingSettings {
        samples,
        precision,
        mask_mode,
    })
}

fn seeds(flag: Option<u64>, c: &FileConfig) -> Seeds {
    Seeds::from_master(flag.or(c.seed).unwrap_or(0))
}

pub fn resolve_train(a: &TrainArgs, c: &FileConfig) -> CliResult<TrainSettings> {
    let seeds = seeds(a.seed, c);
    let (arch, train) = train_config(&a.train, c, &seeds)?;
    Ok(TrainSettings {
        data: data_settings(&a.data, c, a.train.train_limit.or(c.train_limit), None),
        arch,
        train,
        seeds,
        out: required(a.out.clone().or_else(|| c.out.clone()), "out")?,
    })
}

pub fn resolve_sample(a: &SampleArgs, c: &FileConfig) -> CliResult<SampleSettings> {
    Ok(SampleSettings {
        data: data_settings(&a.data, c, None, a.sample.test_limit.or(c.test_limit)),
        model: required(a.model.clone().or_else(|| c.model.clone()), "model")?,
        sampling: sampling_settings(&a.sample, c)?,
        seeds: seeds(a.seed, c),
        out: required(a.out.clone().or_else(|| c.out.clone()), "out")?,
    })
}

pub fn resolve_holdout(a: &HoldoutArgs, c: &FileConfig) -> CliResult<HoldoutSettings> {
    let seeds = seeds(a.seed, c);
    let (arch, train) = train_config(&a.train, c, &seeds)?;
    let fractions = a
        .fractions
        .clone()
        .or_else(|| c.fractions.clone())
        .unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CliError::Usage(format!(
            "fractions must be a nonempty list in [0, 1], got {fractions:?}"
        )));
    }
    Ok(HoldoutSettings {
        train: TrainSettings {
            data: data_settings(
                &a.data,
                c,
                a.train.train_limit.or(c.train_limit),
                a.sample.test_limit.or(c.test_limit),
            ),
            arch,
            train,
            seeds,
            out: required(a.out.clone().or_else(|| c.out.clone()), "out")?,
        },
        sampling: sampling_settings(&a.sample, c)?,
        holdout_class: a.holdout_class.or(c.holdout_class).unwrap_or(DEFAULT_HOLDOUT_CLASS),
        fractions,
    })
}

pub fn resolve_report(a: &ReportArgs, c: &FileConfig) -> CliResult<ReportSettings> {
    let bins = a.bins.or(c.bins).unwrap_or(DEFAULT_BINS);
    if bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    Ok(ReportSettings {
        votes: required(a.votes.clone().or_else(|| c.votes.clone()), "votes")?,
        bins,
        out: required(a.out.clone().or_else(|| c.out.clone()), "out")?,
    })
}
