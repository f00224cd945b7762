//! The four pipeline commands. Each `*_outputs` function is pure in-memory
//! work returning the files it would write; each `run_*` function loads
//! inputs, calls it and commits the files plus a manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use scann::analytics::{
    accuracy_vs_samples, bootstrap_mean_difference, build_confusion, checkpoints_up_to, histogram,
    holdout_entropy_report, mean, Choice, CurvePoint, EntropyReport, VoteTable,
};
use scann::data::{apply_holdout, load_idx_dir, Dataset, HoldoutSpec, Split};
use scann::sampler::{derive_seed, quantize_probabilities, split_weights, Sampler, SamplerSeedPlan};
use scann::trainer::{self, batch_accuracy};
use scann::NetworkSpec;

use crate::config::{DataSettings, HoldoutSettings, ReportSettings, SampleSettings, SamplingSettings, TrainSettings};
use crate::error::{CliError, CliResult};
use crate::manifest::{input_entry, sha256_hex, ExperimentManifest, FileEntry, OutputSet, Seeds, MANIFEST_SCHEMA};
use crate::votes::{self, VoteFile};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

fn progress(msg: impl std::fmt::Display) {
    eprintln!("{msg}");
}

#[derive(Debug)]
struct Timer {
    start: Instant,
    last: Instant,
    marks: BTreeMap<String, u64>,
}

impl Timer {
    fn new() -> Self {
        let now = Instant::now();
        Timer {
            start: now,
            last: now,
            marks: BTreeMap::new(),
        }
    }

    fn mark(&mut self, name: &str) {
        let now = Instant::now();
        *self.marks.entry(name.to_string()).or_default() += (now - self.last).as_millis() as u64;
        self.last = now;
    }

    fn finish(mut self) -> BTreeMap<String, u64> {
        self.marks
            .insert("total".into(), self.start.elapsed().as_millis() as u64);
        self.marks
    }
}

fn manifest(
    command: &str,
    config: &impl Serialize,
    seeds: &Seeds,
    inputs: Vec<FileEntry>,
    timer: Timer,
) -> CliResult<ExperimentManifest> {
    Ok(ExperimentManifest {
        schema: MANIFEST_SCHEMA.into(),
        command: command.into(),
        scann_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(config).map_err(|e| CliError::Internal(e.to_string()))?,
        seeds: seeds.clone(),
        inputs,
        outputs: Vec::new(),
        timings_ms: timer.finish(),
    })
}

fn json(value: &impl Serialize) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

/// Loads one split, truncated to the configured limit, with input checksums.
pub fn load_split(d: &DataSettings, split: Split) -> CliResult<(Dataset, Vec<FileEntry>)> {
    d.check(split)?;
    let (images, labels) = scann::data::idx_paths(d.dir(), split);
    let mut ds = load_idx_dir(d.dir(), split, &d.dataset)?;
    let limit = match split {
        Split::Train => d.train_limit,
        Split::Test => d.test_limit,
    };
    if let Some(n) = limit {
        ds = ds.head(n);
    }
    Ok((ds, vec![input_entry(&images)?, input_entry(&labels)?]))
}

/// Trains a model; outputs `model.scann` and `train_log.csv`.
pub fn train_outputs(
    s: &TrainSettings,
    train: &Dataset,
    test: Option<&Dataset>,
) -> CliResult<(NetworkSpec, OutputSet)> {
    let (mut net, log) = trainer::train(train, test, &s.arch, &s.train, |e| {
        progress(format_args!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {}",
            e.epoch,
            e.loss,
            e.train_accuracy,
            e.test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        ))
    })?;
    net.meta.name = format!(
        "{}-{}",
        s.data.dataset,
        s.arch.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
    );
    if let Some(v) = net.validate_unit_interval().first() {
        return Err(CliError::Internal(format!("trained weight out of range: {v:?}")));
    }
    let mut out = OutputSet::default();
    out.add("model.scann", net.to_bytes());
    out.add("train_log.csv", log.to_csv().into_bytes());
    Ok((net, out))
}

pub fn run_train(s: &TrainSettings) -> CliResult<PathBuf> {
    let mut timer = Timer::new();
    s.data.check(Split::Train)?;
    s.data.check(Split::Test)?;
    let (train, mut inputs) = load_split(&s.data, Split::Train)?;
    let (test, test_inputs) = load_split(&s.data, Split::Test)?;
    inputs.extend(test_inputs);
    timer.mark("load");
    let (_, out) = train_outputs(s, &train, Some(&test))?;
    timer.mark("train");
    out.commit(&s.out, manifest("train", s, &s.seeds, inputs, timer)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub dataset: String,
    pub n_items: usize,
    pub n_classes: usize,
    pub samples: usize,
    pub precision: String,
    pub mask_mode: String,
    pub sampler_seed: u64,
    pub model_sha256: String,
    pub deterministic_accuracy: f64,
    pub first_choice_accuracy: f64,
    pub top2_accuracy: f64,
    pub mean_single_sample_accuracy: f64,
    pub mean_entropy: f64,
    pub mean_entropy_correct: f64,
    pub mean_entropy_incorrect: f64,
    pub mean_information: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub table: VoteTable,
    pub labels: Vec<usize>,
    pub report: EntropyReport,
    pub summary: SampleSummary,
}

/// Votes for every test item; outputs `votes.csv` and `summary.json`.
pub fn sample_outputs(
    net: &NetworkSpec,
    test: &Dataset,
    s: &SamplingSettings,
    seeds: &Seeds,
) -> CliResult<(SampleRun, OutputSet)> {
    if net.input_dim() != test.dim() {
        return Err(CliError::Usage(format!(
            "model expects {} inputs but the dataset has {}",
            net.input_dim(),
            test.dim()
        )));
    }
    if let Some(&l) = test.labels().iter().find(|&&l| l >= net.output_dim()) {
        return Err(CliError::Usage(format!(
            "label {l} exceeds the model's {} outputs",
            net.output_dim()
        )));
    }
    let mut model = split_weights(net)?;
    if let Some(bits) = s.precision.bits() {
        model = quantize_probabilities(&model, bits)?;
    }
    let sampler = Sampler::new(&model, SamplerSeedPlan::new(seeds.sampler, s.mask_mode));
    let table = sampler.run_dataset(test, s.samples)?;
    let labels = test.labels().to_vec();
    let report = EntropyReport::from_table(&table, &labels)?;
    let curve = accuracy_vs_samples(&table, &labels, &checkpoints_up_to(s.samples))?;
    let (h_correct, h_incorrect) = report.mean_entropy_by_correctness();
    let per_sample = scann::analytics::per_sample_accuracy(&table, &labels)?;
    let summary = SampleSummary {
        dataset: test.tag().to_string(),
        n_items: test.len(),
        n_classes: table.n_classes(),
        samples: s.samples,
        precision: s.precision.to_string(),
        mask_mode: s.mask_mode.to_string(),
        sampler_seed: seeds.sampler,
        model_sha256: sha256_hex(&net.to_bytes()),
        deterministic_accuracy: batch_accuracy(net, test),
        first_choice_accuracy: report.accuracy(),
        top2_accuracy: report
            .items
            .iter()
            .filter(|i| i.correct || i.second == Some(i.label))
            .count() as f64
            / report.items.len() as f64,
        mean_single_sample_accuracy: mean(&per_sample),
        mean_entropy: report.mean_entropy(),
        mean_entropy_correct: h_correct,
        mean_entropy_incorrect: h_incorrect,
        mean_information: mean(&report.items.iter().map(|i| i.information).collect::<Vec<_>>()),
        curve,
    };
    let mut out = OutputSet::default();
    out.add("votes.csv", votes::encode(&table, &labels)?);
    out.add("summary.json", json(&summary)?);
    Ok((
        SampleRun {
            table,
            labels,
            report,
            summary,
        },
        out,
    ))
}

pub fn run_sample(s: &SampleSettings) -> CliResult<PathBuf> {
    let mut timer = Timer::new();
    if !s.model.is_file() {
        return Err(CliError::Usage(format!("model file not found: {}", s.model.display())));
    }
    s.data.check(Split::Test)?;
    let net = scann::load_model(&s.model)?;
    let (test, mut inputs) = load_split(&s.data, Split::Test)?;
    inputs.insert(0, input_entry(&s.model)?);
    timer.mark("load");
    let (run, out) = sample_outputs(&net, &test, &s.sampling, &s.seeds)?;
    timer.mark("sample");
    progress(format_args!(
        "first-choice accuracy {:.4} (deterministic {:.4}), mean entropy {:.4} bits",
        run.summary.first_choice_accuracy, run.summary.deterministic_accuracy, run.summary.mean_entropy
    ));
    out.commit(&s.out, manifest("sample", s, &s.seeds, inputs, timer)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub n_items: usize,
    pub n_classes: usize,
    pub samples: usize,
    pub first_choice_accuracy: f64,
    pub mean_entropy_correct: f64,
    pub mean_entropy_incorrect: f64,
    /// Bootstrap interval of mean entropy (incorrect) minus mean entropy (correct).
    pub entropy_gap_ci: Option<scann::analytics::BootstrapCi>,
}

/// Confusion matrices, entropy table and histogram, accuracy curve and a
/// JSON summary. A pure function of the votes file.
pub fn report_outputs(vf: &VoteFile, bins: usize) -> CliResult<(ReportSummary, OutputSet)> {
    let dists = vf.table.distributions()?;
    let report = EntropyReport::from_votes(&dists, &vf.labels, vf.table.n_classes())?;
    let mut out = OutputSet::default();
    out.add(
        "confusion_first.csv",
        build_confusion(Choice::First, &dists, &vf.labels)?
            .to_csv()
            .into_bytes(),
    );
    out.add(
        "confusion_second.csv",
        build_confusion(Choice::Second, &dists, &vf.labels)?
            .to_csv()
            .into_bytes(),
    );
    out.add("entropy_items.csv", report.to_csv().into_bytes());

    let max_h = (vf.table.n_classes() as f64).log2();
    let all = histogram(
        &report.entropies_where(|_| true),
        bins,
        0.0,
        max_h.max(f64::MIN_POSITIVE),
    )?;
    let correct = histogram(
        &report.entropies_where(|i| i.correct),
        bins,
        0.0,
        max_h.max(f64::MIN_POSITIVE),
    )?;
    let wrong = histogram(
        &report.entropies_where(|i| !i.correct),
        bins,
        0.0,
        max_h.max(f64::MIN_POSITIVE),
    )?;
    let mut h = String::from("bin_low,bin_high,all,correct,incorrect\n");
    for ((a, c), w) in all.iter().zip(&correct).zip(&wrong) {
        h.push_str(&format!("{},{},{},{},{}\n", a.low, a.high, a.count, c.count, w.count));
    }
    out.add("entropy_histogram.csv", h.into_bytes());

    let curve = accuracy_vs_samples(&vf.table, &vf.labels, &checkpoints_up_to(vf.table.k()))?;
    let mut c = String::from("k,accuracy\n");
    for p in &curve {
        c.push_str(&format!("{},{}\n", p.k, p.accuracy));
    }
    out.add("accuracy_curve.csv", c.into_bytes());

    let (hc, hi) = report.mean_entropy_by_correctness();
    let wrong_h = report.entropies_where(|i| !i.correct);
    let right_h = report.entropies_where(|i| i.correct);
    let ci = if wrong_h.is_empty() || right_h.is_empty() {
        None
    } else {
        Some(bootstrap_mean_difference(
            &wrong_h,
            &right_h,
            BOOTSTRAP_RESAMPLES,
            BOOTSTRAP_LEVEL,
            derive_seed(0, "bootstrap"),
        )?)
    };
    let summary = ReportSummary {
        n_items: vf.table.n_items(),
        n_classes: vf.table.n_classes(),
        samples: vf.table.k(),
        first_choice_accuracy: report.accuracy(),
        mean_entropy_correct: hc,
        mean_entropy_incorrect: hi,
        entropy_gap_ci: ci,
    };
    out.add("report.json", json(&summary)?);
    Ok((summary, out))
}

pub fn run_report(s: &ReportSettings) -> CliResult<PathBuf> {
    let mut timer = Timer::new();
    if !s.votes.is_file() {
        return Err(CliError::Usage(format!("votes file not found: {}", s.votes.display())));
    }
    let vf = votes::read(&s.votes)?;
    timer.mark("load");
    let (_, out) = report_outputs(&vf, s.bins)?;
    timer.mark("report");
    let seeds = Seeds::from_master(0);
    out.commit(
        &s.out,
        manifest("report", s, &seeds, vec![input_entry(&s.votes)?], timer)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutRow {
    pub fraction: f64,
    pub holdout_class: usize,
    pub removed: usize,
    pub accuracy: f64,
    pub h_in: f64,
    pub h_out: f64,
    pub i_in: f64,
    pub i_out: f64,
    pub n_in: usize,
    pub n_out: usize,
    /// `h_out - h_in` and its bootstrap interval.
    pub gap: f64,
    pub gap_low: f64,
    pub gap_high: f64,
}

/// Entropy of the held-out class against the rest, with a bootstrap
/// interval for the difference of means.
pub fn holdout_row(
    report: &EntropyReport,
    class: usize,
    fraction: f64,
    removed: usize,
    seed: u64,
) -> CliResult<HoldoutRow> {
    let h = holdout_entropy_report(report, class)?;
    let out_h = report.entropies_where(|i| i.label == class);
    let in_h = report.entropies_where(|i| i.label != class);
    let ci = bootstrap_mean_difference(&out_h, &in_h, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, seed)?;
    Ok(HoldoutRow {
        fraction,
        holdout_class: class,
        removed,
        accuracy: report.accuracy(),
        h_in: h.h_in,
        h_out: h.h_out,
        i_in: h.i_in,
        i_out: h.i_out,
        n_in: h.n_in,
        n_out: h.n_out,
        gap: ci.estimate,
        gap_low: ci.low,
        gap_high: ci.high,
    })
}

pub fn fraction_dir(fraction: f64) -> String {
    format!("fraction_{fraction}")
}

pub fn run_holdout(s: &HoldoutSettings) -> CliResult<PathBuf> {
    let mut timer = Timer::new();
    let t = &s.train;
    t.data.check(Split::Train)?;
    t.data.check(Split::Test)?;
    let (train, mut inputs) = load_split(&t.data, Split::Train)?;
    let (test, test_inputs) = load_split(&t.data, Split::Test)?;
    inputs.extend(test_inputs);
    timer.mark("load");

    let mut out = OutputSet::default();
    let mut rows = Vec::new();
    for &fraction in &s.fractions {
        let spec = HoldoutSpec {
            class_index: s.holdout_class,
            removal_fraction: fraction,
            seed: t.seeds.holdout,
        };
        let reduced = apply_holdout(&train, &spec)?;
        let removed = train.len() - reduced.len();
        progress(format_args!(
            "fraction {fraction}: removed {removed} items of class {}",
            s.holdout_class
        ));
        let (net, train_out) = train_outputs(t, &reduced, Some(&test))?;
        timer.mark("train");
        let (run, sample_out) = sample_outputs(&net, &test, &s.sampling, &t.seeds)?;
        timer.mark("sample");
        let dir = fraction_dir(fraction);
        for set in [&train_out, &sample_out] {
            for name in set.names() {
                out.add(format!("{dir}/{name}"), set.get(name).expect("listed").to_vec());
            }
        }
        let row = holdout_row(
            &run.report,
            s.holdout_class,
            fraction,
            removed,
            derive_seed(t.seeds.master, "bootstrap"),
        )?;
        progress(format_args!(
            "  H_in {:.4}  H_out {:.4}  gap {:.4} [{:.4}, {:.4}]",
            row.h_in, row.h_out, row.gap, row.gap_low, row.gap_high
        ));
        rows.push(row);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    out.add(
        "holdout.csv",
        w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?,
    );
    out.commit(&t.out, manifest("holdout", s, &t.seeds, inputs, timer)?)
}
