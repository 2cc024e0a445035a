//! Experiment orchestration: runs a configured setting end to end and writes
//! metrics, checkpoints, binned accuracies, plot data and a summary.

pub mod checkpoint;
pub mod config;
pub mod memory;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{CorpusConfig, EvalConfig, ExperimentConfig, Setting};
pub use memory::{fit_affine, memory_scaling_suite, probe_point, AffineFit, MemoryScalingReport, MemorySweepConfig, SweepAxis};
pub use metrics::{
    detect_exploration_phase, detect_exploration_phase_with, export_plot_data, exploration_threshold, read_metrics_csv,
    write_metrics_csv, BinRow, MemoryProbeSample, PlotKind, TimingRow,
};

use crate::corpus::{build_corpus, load_key_cache, CorpusFileHeader, CorpusReader, CorpusRecord, CorpusSpec, KeyCache};
use crate::datagen::{NeedleConfig, NeedleGenerator, RotatingConfig, RotatingGenerator};
use crate::error::{Error, Result};
use crate::memprobe::{MemTag, MemoryProbe};
use crate::model::{ModelBundle, ModelShape, NoContextModel};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate_baseline_batch, evaluate_batch, evaluate_timebinned, payload_width, train, train_no_context_baseline,
    BinResult, EvalBatch, MetricsRow, PayloadMode, TrainBatch, TrainConfig,
};

/// Outcome of one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: usize,
    pub seed: u64,
    /// Needle: greedy accuracy on fresh data. Otherwise: mean context
    /// accuracy over bins inside the training time range.
    pub final_accuracy: f64,
    /// Mean baseline accuracy over the same bins, when a baseline exists.
    pub baseline_accuracy: Option<f64>,
    /// Mean greedy training accuracy over the last 100 steps.
    pub final_train_accuracy: f64,
    pub final_train_loss: f64,
    pub exploration_step: Option<usize>,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin_center: f64,
    pub context_acc: Option<f64>,
    pub context_stderr: Option<f64>,
    pub baseline_acc: Option<f64>,
    pub baseline_stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub setting: Setting,
    pub output_dir: PathBuf,
    pub repetitions: Vec<RepSummary>,
    pub bins: Vec<BinSummary>,
}

impl RunSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(run_dir.join("summary.toml"))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("summary.toml: {e}")))
    }
}

/// Everything one repetition produced, before it is written out.
pub struct RepOutcome {
    pub summary: RepSummary,
    pub metrics: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
    pub bins: Vec<BinResult>,
    pub bundle: ModelBundle,
    pub baseline: Option<NoContextModel>,
    pub optimizer: crate::optim::OptimizerState,
    pub peaks: Vec<(MemTag, usize)>,
}

fn shifted_needle(cfg: &ExperimentConfig, rep: usize) -> NeedleConfig {
    NeedleConfig {
        seed: cfg.needle.seed.wrapping_add(rep as u64),
        ..cfg.needle.clone()
    }
}

fn shifted_rotating(cfg: &ExperimentConfig, rep: usize) -> RotatingConfig {
    RotatingConfig {
        seed: cfg.rotating.seed.wrapping_add(rep as u64),
        ..cfg.rotating.clone()
    }
}

/// Equal-width bins over `range`.
pub fn time_bins(range: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    let w = (range[1] - range[0]) / n as f64;
    (0..n)
        .map(|i| {
            let hi = if i + 1 == n { range[1] } else { range[0] + (i + 1) as f64 * w };
            [range[0] + i as f64 * w, hi]
        })
        .collect()
}

fn in_range(bin: [f64; 2], range: [f64; 2]) -> bool {
    bin[0] >= range[0] && bin[1] <= range[1] + 1e-12
}

fn mean_over<'a>(xs: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn train_cfg(cfg: &ExperimentConfig, rep: usize) -> TrainConfig {
    TrainConfig {
        seed: cfg.rep_seed(rep),
        ..cfg.train.clone()
    }
}

fn train_timed(
    bundle: &mut ModelBundle,
    tc: &TrainConfig,
    probe: &MemoryProbe,
    next_batch: impl FnMut(u64, &mut Rng) -> Result<TrainBatch>,
) -> Result<(crate::optim::OptimizerState, Vec<MetricsRow>, Vec<TimingRow>, f64)> {
    let start = Instant::now();
    let mut timing = Vec::with_capacity(tc.steps as usize);
    let (opt, metrics) = train(bundle, tc, probe, next_batch, |m| {
        timing.push(TimingRow {
            step: m.step,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        })
    })?;
    Ok((opt, metrics, timing, start.elapsed().as_secs_f64()))
}

fn tail_mean(metrics: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(100)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

fn summarize(
    rep: usize,
    seed: u64,
    metrics: &[MetricsRow],
    final_accuracy: f64,
    baseline_accuracy: Option<f64>,
    secs: f64,
) -> RepSummary {
    let losses: Vec<f64> = metrics.iter().map(|m| m.loss_greedy).collect();
    RepSummary {
        rep,
        seed,
        final_accuracy,
        baseline_accuracy,
        final_train_accuracy: tail_mean(metrics, |m| m.accuracy),
        final_train_loss: tail_mean(metrics, |m| m.loss_greedy),
        exploration_step: detect_exploration_phase(&losses),
        train_seconds: secs,
    }
}

fn peaks(probe: &MemoryProbe) -> Vec<(MemTag, usize)> {
    MemTag::ALL.iter().map(|&t| (t, probe.peak(t))).collect()
}

fn needle_bundle(cfg: &ExperimentConfig, gen: &NeedleGenerator, seed: u64) -> Result<ModelBundle> {
    let nc = gen.config();
    let shape = ModelShape {
        input_dim: nc.key_dim,
        key_dim: nc.key_dim,
        kappa: cfg.train.kappa,
        payload_dim: nc.bitstring_length,
        classes: 2,
    };
    ModelBundle::new(cfg.model.clone(), shape, &mut rng::stream(seed, streams::MODEL_INIT))
}

fn needle_accuracy(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    gen: &NeedleGenerator,
    rng: &mut Rng,
    probe: &MemoryProbe,
) -> Result<f64> {
    let (mut rows, mut correct) = (0, 0);
    let mut left = cfg.eval.rows;
    while left > 0 {
        let n = left.min(cfg.eval.batch_size);
        left -= n;
        let e = evaluate_batch(bundle, &TrainBatch::from_needle(&gen.batch(n, rng))?, probe)?;
        rows += e.rows;
        correct += e.correct;
    }
    Ok(if rows > 0 { correct as f64 / rows as f64 } else { f64::NAN })
}

fn run_needle(cfg: &ExperimentConfig, rep: usize) -> Result<RepOutcome> {
    let tc = train_cfg(cfg, rep);
    let gen = NeedleGenerator::new(shifted_needle(cfg, rep))?;
    let mut bundle = needle_bundle(cfg, &gen, tc.seed)?;
    let probe = MemoryProbe::new();
    let (optimizer, metrics, timing, secs) = train_timed(&mut bundle, &tc, &probe, |_, r| {
        TrainBatch::from_needle(&gen.batch(tc.batch_size, r))
    })?;
    let acc = needle_accuracy(cfg, &bundle, &gen, &mut rng::stream(tc.seed, streams::EVAL_DATA), &probe)?;
    Ok(RepOutcome {
        summary: summarize(rep, tc.seed, &metrics, acc, None, secs),
        peaks: peaks(&probe),
        metrics,
        timing,
        bins: Vec::new(),
        bundle,
        baseline: None,
        optimizer,
    })
}

fn train_baseline(cfg: &ExperimentConfig, gen: &RotatingGenerator, seed: u64) -> Result<NoContextModel> {
    let f = gen.config().feature_dim();
    let range = gen.config().train_time_range;
    let bs = cfg.baseline.batch_size;
    let (model, _) = train_no_context_baseline(&cfg.baseline, f, 2, seed, |r| {
        let (x, y, _) = gen.examples(bs, range, r)?;
        Ok((Tensor::matrix(bs, f, x)?, y))
    })?;
    Ok(model)
}

fn bin_accuracies(bins: &[BinResult], range: [f64; 2]) -> (f64, Option<f64>) {
    let inside: Vec<&BinResult> = bins.iter().filter(|b| in_range(b.bin, range)).collect();
    (
        mean_over(inside.iter().map(|b| &b.context_accuracy)).unwrap_or(f64::NAN),
        mean_over(inside.iter().map(|b| &b.baseline_accuracy)),
    )
}

fn run_rotating(cfg: &ExperimentConfig, rep: usize) -> Result<RepOutcome> {
    let tc = train_cfg(cfg, rep);
    let gen = RotatingGenerator::new(shifted_rotating(cfg, rep))?;
    let rc = gen.config().clone();
    let f = rc.feature_dim();
    let mode = cfg.payload_mode();
    let shape = ModelShape {
        input_dim: f,
        key_dim: f,
        kappa: tc.kappa,
        payload_dim: payload_width(mode, f, 2),
        classes: 2,
    };
    let mut bundle = ModelBundle::new(cfg.model.clone(), shape, &mut rng::stream(tc.seed, streams::MODEL_INIT))?;
    let probe = MemoryProbe::new();
    let (optimizer, metrics, timing, secs) = train_timed(&mut bundle, &tc, &probe, |_, r| {
        TrainBatch::from_rotating(&gen.batch(tc.batch_size, rc.train_time_range, r)?, mode)
    })?;
    let baseline = train_baseline(cfg, &gen, tc.seed)?;
    let bins = evaluate_timebinned(
        &bundle,
        Some(&baseline),
        &gen,
        &time_bins(rc.test_time_range, cfg.eval.bins),
        cfg.eval.rows_per_bin,
        cfg.eval.batch_size,
        mode,
        &mut rng::stream(tc.seed, streams::EVAL_DATA),
        &probe,
    )?;
    let (acc, base) = bin_accuracies(&bins, rc.train_time_range);
    Ok(RepOutcome {
        summary: summarize(rep, tc.seed, &metrics, acc, base, secs),
        peaks: peaks(&probe),
        metrics,
        timing,
        bins,
        bundle,
        baseline: Some(baseline),
        optimizer,
    })
}

/// Rotating-setting records at uniform times in `[0, 1]`, keyed by a fixed
/// Gaussian projection of their features.
pub struct RotatingRecords<'a> {
    gen: &'a RotatingGenerator,
    projection: Vec<f32>,
    rng: Rng,
    left: usize,
}

impl<'a> RotatingRecords<'a> {
    pub fn new(gen: &'a RotatingGenerator, records: usize, key_dim: usize, seed: u64) -> Self {
        let f = gen.config().feature_dim();
        let mut rng = rng::stream(seed, streams::CORPUS);
        let scale = 1.0 / (f as f64).sqrt();
        let projection = (0..key_dim * f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (scale * z) as f32
            })
            .collect();
        Self {
            gen,
            projection,
            rng,
            left: records,
        }
    }

    /// `[key_dim, F]` projection from features to keys.
    pub fn projection(&self) -> &[f32] {
        &self.projection
    }
}

impl Iterator for RotatingRecords<'_> {
    type Item = CorpusRecord;

    fn next(&mut self) -> Option<CorpusRecord> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let t = self.rng.random_range(0.0..1.0);
        let (features, label) = self.gen.example(t, &mut self.rng);
        let key = self
            .projection
            .chunks_exact(features.len())
            .map(|row| row.iter().zip(&features).map(|(a, b)| a * b).sum())
            .collect();
        Some(CorpusRecord {
            features,
            label: label as u32,
            timestamp: t,
            key,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.left, Some(self.left))
    }
}

pub fn build_rotating_corpus(
    gen: &RotatingGenerator,
    records: usize,
    key_dim: usize,
    seed: u64,
    path: &Path,
) -> Result<CorpusFileHeader> {
    let spec = CorpusSpec {
        feature_dim: gen.config().feature_dim(),
        key_dim,
        label_cardinality: 2,
        label_only: false,
    };
    build_corpus(RotatingRecords::new(gen, records, key_dim, seed), spec, path)
}

/// Records with standard-normal features and keys, fair-coin labels and
/// uniform times; used where only sizes matter.
pub fn random_records(
    records: usize,
    feature_dim: usize,
    key_dim: usize,
    seed: u64,
) -> impl Iterator<Item = CorpusRecord> {
    let mut rng = rng::stream(seed, streams::CORPUS);
    (0..records).map(move |_| {
        let features = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let key = (0..key_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        CorpusRecord {
            features,
            label: rng.random_range(0..2u32),
            timestamp: rng.random_range(0.0..1.0),
            key,
        }
    })
}

fn corpus_batch(
    gen: &RotatingGenerator,
    n: usize,
    range: [f64; 2],
    cache: &Arc<KeyCache>,
    reader: &Arc<CorpusReader>,
    mode: PayloadMode,
    rng: &mut Rng,
) -> Result<(TrainBatch, Tensor)> {
    let f = gen.config().feature_dim();
    let (x, y, t) = gen.examples(n, range, rng)?;
    let inputs = Tensor::matrix(n, f, x)?;
    let batch = TrainBatch::from_corpus(inputs.clone(), y, &t, cache.clone(), reader.clone(), mode)?;
    Ok((batch, inputs))
}

fn run_corpus(cfg: &ExperimentConfig, rep: usize) -> Result<RepOutcome> {
    let tc = train_cfg(cfg, rep);
    let gen = RotatingGenerator::new(shifted_rotating(cfg, rep))?;
    let rc = gen.config().clone();
    let f = rc.feature_dim();
    let mode = cfg.payload_mode();
    let path = match &cfg.corpus.path {
        Some(p) => p.clone(),
        None => {
            let p = cfg.output_dir.join(format!("rep{rep}")).join("corpus.nrac");
            build_rotating_corpus(&gen, cfg.corpus.records, cfg.corpus.key_dim, cfg.corpus.seed, &p)?;
            p
        }
    };
    let probe = MemoryProbe::new();
    if cfg.corpus.retrieved_budget_bytes > 0 {
        probe.set_budget(MemTag::Retrieved, cfg.corpus.retrieved_budget_bytes);
    }
    let reader = Arc::new(CorpusReader::open(&path)?);
    let h = *reader.header();
    if h.feature_dim as usize != f {
        return Err(Error::config(
            "corpus.path",
            format!("corpus feature_dim {} does not match the rotating setting's {f}", h.feature_dim),
        ));
    }
    let cache = Arc::new(load_key_cache(&path, &probe)?);
    let classes = h.label_cardinality as usize;
    let shape = ModelShape {
        input_dim: f,
        key_dim: h.key_dim as usize,
        kappa: tc.kappa,
        payload_dim: payload_width(mode, f, classes),
        classes,
    };
    let mut bundle = ModelBundle::new(cfg.model.clone(), shape, &mut rng::stream(tc.seed, streams::MODEL_INIT))?;
    let _params = probe.reserve(MemTag::Params, 3 * bundle.params.num_bytes())?;
    let (optimizer, metrics, timing, secs) = train_timed(&mut bundle, &tc, &probe, |_, r| {
        Ok(corpus_batch(&gen, tc.batch_size, rc.train_time_range, &cache, &reader, mode, r)?.0)
    })?;
    let baseline = train_baseline(cfg, &gen, tc.seed)?;
    let mut eval_rng = rng::stream(tc.seed, streams::EVAL_DATA);
    let mut bins = Vec::with_capacity(cfg.eval.bins);
    for bin in time_bins(rc.test_time_range, cfg.eval.bins) {
        let mut ctx = EvalBatch {
            rows: 0,
            correct: 0,
            loss_sum: 0.0,
        };
        let mut base = ctx.clone();
        let mut left = cfg.eval.rows_per_bin;
        while left > 0 {
            let n = left.min(cfg.eval.batch_size);
            left -= n;
            let (batch, inputs) = corpus_batch(&gen, n, bin, &cache, &reader, mode, &mut eval_rng)?;
            let e = evaluate_batch(&bundle, &batch, &probe)?;
            ctx.rows += e.rows;
            ctx.correct += e.correct;
            ctx.loss_sum += e.loss_sum;
            let e = evaluate_baseline_batch(&baseline, &inputs, &batch.labels)?;
            base.rows += e.rows;
            base.correct += e.correct;
            base.loss_sum += e.loss_sum;
        }
        let acc = |e: &EvalBatch| (e.rows > 0).then(|| e.correct as f64 / e.rows as f64);
        let loss = |e: &EvalBatch| (e.rows > 0).then(|| e.loss_sum / e.rows as f64);
        bins.push(BinResult {
            bin,
            rows: ctx.rows,
            context_accuracy: acc(&ctx),
            context_loss: loss(&ctx),
            baseline_accuracy: acc(&base),
            baseline_loss: loss(&base),
        });
    }
    let (acc, base) = bin_accuracies(&bins, rc.train_time_range);
    Ok(RepOutcome {
        summary: summarize(rep, tc.seed, &metrics, acc, base, secs),
        peaks: peaks(&probe),
        metrics,
        timing,
        bins,
        bundle,
        baseline: Some(baseline),
        optimizer,
    })
}

/// Trains and evaluates repetition `rep` without writing anything.
pub fn run_repetition(cfg: &ExperimentConfig, rep: usize) -> Result<RepOutcome> {
    cfg.validate()?;
    match cfg.setting {
        Setting::Needle => run_needle(cfg, rep),
        Setting::Rotating => run_rotating(cfg, rep),
        Setting::Corpus => run_corpus(cfg, rep),
    }
}

fn bin_rows(bins: &[BinResult]) -> Vec<BinRow> {
    bins.iter()
        .map(|b| BinRow {
            bin_start: b.bin[0],
            bin_end: b.bin[1],
            rows: b.rows,
            context_acc: b.context_accuracy,
            context_loss: b.context_loss,
            baseline_acc: b.baseline_accuracy,
            baseline_loss: b.baseline_loss,
        })
        .collect()
}

#[derive(Serialize)]
struct PeakRow {
    label: &'static str,
    peak_bytes: usize,
    rss_bytes: Option<usize>,
}

/// Validates `cfg`, runs every repetition and writes the artifact
/// directory:
///
/// ```text
/// config.toml  summary.toml  loss_vs_step.csv  entropy_vs_step.csv
/// [accuracy_vs_time.csv]
/// rep<r>/metrics.csv  timing.csv  checkpoint.bin  [baseline.bin bins.csv]
///        [memory.csv]
/// ```
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), format!("{}{hash}\n{}", metrics::HASH_PREFIX, cfg.to_toml()))?;
    let mut reps = Vec::with_capacity(cfg.repetitions);
    let mut all_bins = Vec::new();
    for rep in 0..cfg.repetitions {
        let rep_dir = dir.join(format!("rep{rep}"));
        std::fs::create_dir_all(&rep_dir)?;
        let out = run_repetition(cfg, rep)?;
        write_metrics_csv(&rep_dir.join("metrics.csv"), &hash, &out.metrics)?;
        metrics::write_csv(&rep_dir.join("timing.csv"), &hash, &out.timing)?;
        save_checkpoint(&rep_dir.join("checkpoint.bin"), &out.bundle.params, Some(&out.optimizer), &hash)?;
        if let Some(b) = &out.baseline {
            save_checkpoint(&rep_dir.join("baseline.bin"), &b.params, None, &hash)?;
        }
        if !out.bins.is_empty() {
            let rows = bin_rows(&out.bins);
            metrics::write_csv(&rep_dir.join("bins.csv"), &hash, &rows)?;
            all_bins.push(rows);
        }
        if cfg.memory_probe {
            let rss = crate::memprobe::resident_set_bytes();
            let rows: Vec<PeakRow> = out
                .peaks
                .iter()
                .map(|&(t, b)| PeakRow {
                    label: t.as_str(),
                    peak_bytes: b,
                    rss_bytes: rss,
                })
                .collect();
            metrics::write_csv(&rep_dir.join("memory.csv"), &hash, &rows)?;
        }
        reps.push(out.summary);
    }
    let bins = metrics::aggregate_bins(&all_bins)?
        .into_iter()
        .map(|(c, ctx, base)| BinSummary {
            bin_center: c,
            context_acc: ctx.map(|v| v.0),
            context_stderr: ctx.map(|v| v.1),
            baseline_acc: base.map(|v| v.0),
            baseline_stderr: base.map(|v| v.1),
        })
        .collect();
    let summary = RunSummary {
        config_hash: hash,
        setting: cfg.setting,
        output_dir: dir.clone(),
        repetitions: reps,
        bins,
    };
    let text = toml::to_string(&summary).map_err(|e| Error::invalid(format!("summary: {e}")))?;
    std::fs::write(dir.join("summary.toml"), text)?;
    export_plot_data(dir, PlotKind::LossVsStep)?;
    export_plot_data(dir, PlotKind::EntropyVsStep)?;
    if !all_bins.is_empty() {
        export_plot_data(dir, PlotKind::AccuracyVsTime)?;
    }
    Ok(summary)
}

/// Scores a saved checkpoint the way the end of a run does, on data from
/// repetition `rep`'s generators.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, rep: usize, checkpoint: &Path) -> Result<RepSummary> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    Ok(match cfg.setting {
        Setting::Needle => {
            let gen = NeedleGenerator::new(shifted_needle(cfg, rep))?;
            let mut bundle = needle_bundle(cfg, &gen, 0)?;
            bundle.params.load_from(&ck.params)?;
            let probe = MemoryProbe::new();
            let acc = needle_accuracy(cfg, &bundle, &gen, &mut rng::stream(cfg.rep_seed(rep), streams::EVAL_DATA), &probe)?;
            summarize(rep, cfg.rep_seed(rep), &[], acc, None, 0.0)
        }
        Setting::Rotating => {
            let gen = RotatingGenerator::new(shifted_rotating(cfg, rep))?;
            let rc = gen.config().clone();
            let f = rc.feature_dim();
            let mode = cfg.payload_mode();
            let shape = ModelShape {
                input_dim: f,
                key_dim: f,
                kappa: cfg.train.kappa,
                payload_dim: payload_width(mode, f, 2),
                classes: 2,
            };
            let mut bundle = ModelBundle::new(cfg.model.clone(), shape, &mut rng::stream(0, streams::MODEL_INIT))?;
            bundle.params.load_from(&ck.params)?;
            let probe = MemoryProbe::new();
            let bins = evaluate_timebinned(
                &bundle,
                None,
                &gen,
                &time_bins(rc.test_time_range, cfg.eval.bins),
                cfg.eval.rows_per_bin,
                cfg.eval.batch_size,
                mode,
                &mut rng::stream(cfg.rep_seed(rep), streams::EVAL_DATA),
                &probe,
            )?;
            let (acc, _) = bin_accuracies(&bins, rc.train_time_range);
            summarize(rep, cfg.rep_seed(rep), &[], acc, None, 0.0)
        }
        Setting::Corpus => {
            return Err(Error::config("setting", "checkpoint evaluation supports needle and rotating runs"));
        }
    })
}

/// Final accuracy and detected exploration step of one needle run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleSweepRow {
    pub history_size: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub exploration_step: Option<usize>,
}

/// Runs `base` at every history size and seed, each into
/// `<output_dir>/k<K>_s<seed>`, and writes `needle_sweep.csv`.
pub fn needle_sweep(base: &ExperimentConfig, history_sizes: &[usize], seeds: &[u64]) -> Result<Vec<NeedleSweepRow>> {
    if base.setting != Setting::Needle {
        return Err(Error::config("setting", "needle sweep requires the needle setting"));
    }
    let mut rows = Vec::new();
    for &k in history_sizes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.needle.history_size = k;
            cfg.train.seed = seed;
            cfg.needle.seed = seed;
            cfg.repetitions = 1;
            cfg.output_dir = base.output_dir.join(format!("k{k}_s{seed}"));
            let s = run_experiment(&cfg)?;
            rows.push(NeedleSweepRow {
                history_size: k,
                seed,
                final_accuracy: s.repetitions[0].final_accuracy,
                exploration_step: s.repetitions[0].exploration_step,
            });
        }
    }
    std::fs::create_dir_all(&base.output_dir)?;
    metrics::write_csv(&base.output_dir.join("needle_sweep.csv"), &base.hash(), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusReader;

    fn tiny_needle(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::needle(4, dir);
        cfg.model.hidden_width = 16;
        cfg.train.steps = 6;
        cfg.train.batch_size = 16;
        cfg.eval.rows = 40;
        cfg.eval.batch_size = 16;
        cfg
    }

    #[test]
    fn time_bins_cover_the_range() {
        let b = time_bins([0.0, 1.0], 20);
        assert_eq!(b.len(), 20);
        assert_eq!(b[0], [0.0, 0.05]);
        assert_eq!(b[19][1], 1.0);
        for w in b.windows(2) {
            assert_eq!(w[0][1], w[1][0]);
        }
    }

    #[test]
    fn needle_run_writes_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_needle(&dir.path().join("a"));
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.repetitions.len(), 1);
        assert!(s.bins.is_empty());
        let a = dir.path().join("a");
        for f in ["config.toml", "summary.toml", "loss_vs_step.csv", "entropy_vs_step.csv", "rep0/metrics.csv", "rep0/timing.csv", "rep0/checkpoint.bin", "rep0/memory.csv"] {
            let p = a.join(f);
            assert!(p.exists(), "{f}");
            if f.ends_with(".csv") || f == "config.toml" {
                let text = std::fs::read_to_string(&p).unwrap();
                assert!(text.starts_with(&format!("# config_hash={}", s.config_hash)), "{f}");
            }
        }
        assert_eq!(RunSummary::load(&a).unwrap(), s);
        let ck = load_checkpoint(&a.join("rep0/checkpoint.bin")).unwrap();
        assert_eq!(ck.config_hash, s.config_hash);
        assert_eq!(ck.optimizer.unwrap().step, 6);

        let mut again = cfg.clone();
        again.output_dir = dir.path().join("b");
        run_experiment(&again).unwrap();
        let m1 = std::fs::read(a.join("rep0/metrics.csv")).unwrap();
        let m2 = std::fs::read(dir.path().join("b/rep0/metrics.csv")).unwrap();
        assert_eq!(m1, m2);

        let e = evaluate_checkpoint(&cfg, 0, &a.join("rep0/checkpoint.bin")).unwrap();
        assert_eq!(e.final_accuracy, s.repetitions[0].final_accuracy);
    }

    #[test]
    fn invalid_config_is_rejected_before_any_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_needle(&dir.path().join("x"));
        cfg.train.kappa = 9;
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.is_config_error());
        assert!(!dir.path().join("x").exists());
    }

    #[test]
    fn rotating_run_reports_bins_for_each_repetition() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::rotating(dir.path());
        cfg.repetitions = 2;
        cfg.model.hidden_width = 16;
        cfg.rotating.dim = 8;
        cfg.rotating.history_size = 16;
        cfg.train.kappa = 2;
        cfg.train.steps = 3;
        cfg.train.batch_size = 8;
        cfg.baseline.hidden_width = 8;
        cfg.baseline.steps = 3;
        cfg.baseline.batch_size = 8;
        cfg.eval.bins = 4;
        cfg.eval.rows_per_bin = 10;
        cfg.eval.batch_size = 4;
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.bins.len(), 4);
        assert!(s.bins.iter().all(|b| b.context_stderr.is_some() && b.baseline_acc.is_some()));
        assert!(s.repetitions[0].baseline_accuracy.is_some());
        assert!(dir.path().join("accuracy_vs_time.csv").exists());
        assert!(dir.path().join("rep1/baseline.bin").exists());
    }

    #[test]
    fn corpus_run_trains_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::rotating(dir.path());
        cfg.setting = Setting::Corpus;
        cfg.model.hidden_width = 16;
        cfg.rotating.dim = 8;
        cfg.corpus.records = 300;
        cfg.corpus.key_dim = 4;
        cfg.train.kappa = 2;
        cfg.train.steps = 2;
        cfg.train.batch_size = 8;
        cfg.baseline.hidden_width = 8;
        cfg.baseline.steps = 2;
        cfg.baseline.batch_size = 8;
        cfg.eval.bins = 2;
        cfg.eval.rows_per_bin = 8;
        cfg.eval.batch_size = 8;
        cfg.corpus.retrieved_budget_bytes = 1 << 20;
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.bins.len(), 2);
        let r = CorpusReader::open(&dir.path().join("rep0/corpus.nrac")).unwrap();
        assert_eq!(r.len(), 300);
        let (_, m) = read_metrics_csv(&dir.path().join("rep0/metrics.csv")).unwrap();
        let d = cfg.rotating.feature_dim();
        assert!(m.iter().all(|m| m.peak_retrieved_bytes <= 8 * 2 * (4 * d + 4)));
    }

    #[test]
    fn rotating_records_keys_are_projected_features() {
        let gen = RotatingGenerator::new(RotatingConfig {
            dim: 4,
            ..RotatingConfig::default()
        })
        .unwrap();
        let recs = RotatingRecords::new(&gen, 5, 3, 7);
        let p = recs.projection().to_vec();
        let f = gen.config().feature_dim();
        for r in recs {
            assert!((0.0..1.0).contains(&r.timestamp));
            for (j, k) in r.key.iter().enumerate() {
                let want: f64 = (0..f).map(|i| p[j * f + i] as f64 * r.features[i] as f64).sum();
                assert!((*k as f64 - want).abs() < 1e-4);
            }
        }
    }
}
