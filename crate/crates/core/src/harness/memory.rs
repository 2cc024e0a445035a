//! Peak tagged memory across a sweep of one hyperparameter, with an affine
//! fit of bytes against the swept value.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{write_csv, MemoryProbeSample, MEMORY_FILE};
use super::random_records;
use crate::corpus::{build_corpus, load_key_cache, CorpusReader, CorpusSpec};
use crate::error::{Error, Result};
use crate::memprobe::{resident_set_bytes, MemTag, MemoryProbe};
use crate::model::{ModelBundle, ModelConfig, ModelShape};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::trainer::{payload_width, train, PayloadMode, TrainBatch, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Corpus size K̃; fitted on the key cache.
    Records,
    /// Batch size B; fitted on the logits buffer.
    BatchSize,
    /// Retrieved items per row κ; fitted on retrieved payloads.
    Kappa,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Records => "records",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Kappa => "kappa",
        }
    }

    /// The tag whose growth this axis drives.
    pub fn tag(self) -> MemTag {
        match self {
            SweepAxis::Records => MemTag::Keys,
            SweepAxis::BatchSize => MemTag::Logits,
            SweepAxis::Kappa => MemTag::Retrieved,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "records" | "k_tilde" => Ok(SweepAxis::Records),
            "batch_size" | "batch" => Ok(SweepAxis::BatchSize),
            "kappa" => Ok(SweepAxis::Kappa),
            _ => Err(Error::config("sweep", format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySweepConfig {
    pub records: usize,
    pub batch_size: usize,
    pub kappa: usize,
    pub key_dim: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    /// Training steps per sweep point.
    pub steps: u64,
    pub seed: u64,
    /// Corpora are cached here by size; `memory.csv` is written here.
    pub work_dir: PathBuf,
    /// Per-tag budget for retrieved payloads; 0 means unlimited.
    pub retrieved_budget_bytes: usize,
}

impl Default for MemorySweepConfig {
    fn default() -> Self {
        Self {
            records: 10_000,
            batch_size: 16,
            kappa: 4,
            key_dim: 64,
            feature_dim: 64,
            hidden_width: 32,
            steps: 2,
            seed: 0,
            work_dir: PathBuf::from("memory_sweep"),
            retrieved_budget_bytes: 0,
        }
    }
}

impl MemorySweepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("records", self.records),
            ("batch_size", self.batch_size),
            ("kappa", self.kappa),
            ("key_dim", self.key_dim),
            ("feature_dim", self.feature_dim),
            ("hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        Ok(())
    }

    fn with(&self, axis: SweepAxis, value: usize) -> Self {
        let mut c = self.clone();
        match axis {
            SweepAxis::Records => c.records = value,
            SweepAxis::BatchSize => c.batch_size = value,
            SweepAxis::Kappa => c.kappa = value,
        }
        c
    }

    /// Bytes per unit of `axis` predicted by the storage layout.
    pub fn analytic_slope(&self, axis: SweepAxis) -> f64 {
        match axis {
            SweepAxis::Records => (4 * self.key_dim + 8) as f64,
            SweepAxis::BatchSize => (4 * self.records) as f64,
            SweepAxis::Kappa => (self.batch_size * (4 * self.feature_dim + 4)) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

/// Least-squares `y = a + b x`; needs two distinct `x` values.
pub fn fit_affine(x: &[f64], y: &[f64]) -> Option<AffineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(AffineFit { intercept, slope, r2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryScalingReport {
    pub axis: SweepAxis,
    pub tag: MemTag,
    /// Every tag at every sweep point.
    pub samples: Vec<MemoryProbeSample>,
    pub fit: AffineFit,
    pub analytic_slope: f64,
}

fn corpus_path(dir: &Path, c: &MemorySweepConfig) -> PathBuf {
    dir.join(format!("random_{}_{}_{}_{}.nrac", c.records, c.feature_dim, c.key_dim, c.seed))
}

/// Builds the sweep corpus unless a file with the same dimensions exists.
pub fn ensure_random_corpus(c: &MemorySweepConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&c.work_dir)?;
    let path = corpus_path(&c.work_dir, c);
    if let Ok(r) = CorpusReader::open(&path) {
        let h = r.header();
        if h.record_count as usize == c.records && h.feature_dim as usize == c.feature_dim && h.key_dim as usize == c.key_dim {
            return Ok(path);
        }
    }
    let spec = CorpusSpec {
        feature_dim: c.feature_dim,
        key_dim: c.key_dim,
        label_cardinality: 2,
        label_only: false,
    };
    build_corpus(random_records(c.records, c.feature_dim, c.key_dim, c.seed), spec, &path)?;
    Ok(path)
}

/// Trains `c.steps` steps against the sweep corpus and returns the peak of
/// every tag during the last step.
pub fn probe_point(c: &MemorySweepConfig, value: usize) -> Result<Vec<MemoryProbeSample>> {
    c.validate()?;
    let path = ensure_random_corpus(c)?;
    let probe = MemoryProbe::new();
    if c.retrieved_budget_bytes > 0 {
        probe.set_budget(MemTag::Retrieved, c.retrieved_budget_bytes);
    }
    let reader = Arc::new(CorpusReader::open(&path)?);
    let cache = Arc::new(load_key_cache(&path, &probe)?);
    let shape = ModelShape {
        input_dim: c.feature_dim,
        key_dim: c.key_dim,
        kappa: c.kappa,
        payload_dim: payload_width(PayloadMode::Full, c.feature_dim, 2),
        classes: 2,
    };
    let model = ModelConfig {
        hidden_width: c.hidden_width,
        ..ModelConfig::default()
    };
    let mut bundle = ModelBundle::new(model, shape, &mut rng::stream(c.seed, streams::MODEL_INIT))?;
    // Weights plus two optimizer moments.
    let _params = probe.reserve(MemTag::Params, 3 * bundle.params.num_bytes())?;
    let tc = TrainConfig {
        seed: c.seed,
        ..TrainConfig::plain(c.steps, c.batch_size, 1e-4, c.kappa)
    };
    train(
        &mut bundle,
        &tc,
        &probe,
        |_, r| {
            let x: Vec<f32> = (0..c.batch_size * c.feature_dim).map(|_| StandardNormal.sample(r)).collect();
            let y: Vec<usize> = (0..c.batch_size).map(|_| r.random_range(0..2)).collect();
            // Late query times keep about half the corpus retrievable.
            let t: Vec<f64> = (0..c.batch_size).map(|_| r.random_range(0.5..1.0)).collect();
            TrainBatch::from_corpus(
                Tensor::matrix(c.batch_size, c.feature_dim, x)?,
                y,
                &t,
                cache.clone(),
                reader.clone(),
                PayloadMode::Full,
            )
        },
        |_| {},
    )?;
    let rss = resident_set_bytes();
    Ok(MemTag::ALL
        .iter()
        .map(|&tag| MemoryProbeSample {
            label: tag.as_str().to_string(),
            bytes: probe.peak(tag),
            rss_bytes: rss,
            records: c.records,
            batch_size: c.batch_size,
            kappa: c.kappa,
            key_dim: c.key_dim,
            feature_dim: c.feature_dim,
            value,
        })
        .collect())
}

fn sweep_hash(base: &MemorySweepConfig, axis: SweepAxis, values: &[usize]) -> String {
    let text = format!(
        "{}\naxis = \"{}\"\nvalues = {:?}\n",
        toml::to_string(base).expect("sweep config serializes"),
        axis.as_str(),
        values
    );
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Probes every value of `axis` (ascending) and fits the driven tag's
/// peak bytes affinely. Writes `memory.csv` to the work directory.
pub fn memory_scaling_suite(base: &MemorySweepConfig, axis: SweepAxis, values: &[usize]) -> Result<MemoryScalingReport> {
    base.validate()?;
    if values.len() < 2 {
        return Err(Error::config("values", "need at least two sweep points"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("values", "sweep values must be strictly ascending"));
    }
    let mut samples = Vec::with_capacity(values.len() * MemTag::ALL.len());
    for &v in values {
        samples.extend(probe_point(&base.with(axis, v), v)?);
    }
    let tag = axis.tag();
    let (x, y): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .filter(|s| s.label == tag.as_str())
        .map(|s| (s.value as f64, s.bytes as f64))
        .unzip();
    let fit = fit_affine(&x, &y).ok_or_else(|| Error::invalid("degenerate sweep"))?;
    write_csv(&base.work_dir.join(MEMORY_FILE), &sweep_hash(base, axis, values), &samples)?;
    Ok(MemoryScalingReport {
        axis,
        tag,
        samples,
        fit,
        analytic_slope: base.analytic_slope(axis),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_recovers_exact_lines() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 264.0 * v).collect();
        let f = fit_affine(&x, &y).unwrap();
        assert!((f.slope - 264.0).abs() < 1e-9);
        assert!((f.intercept - 3.0).abs() < 1e-9);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_affine(&[1.0, 1.0], &[2.0, 3.0]).is_none());
        assert!(fit_affine(&[1.0], &[2.0]).is_none());
    }

    #[test]
    fn small_sweeps_match_the_layout() {
        let dir = tempfile::tempdir().unwrap();
        let base = MemorySweepConfig {
            records: 400,
            batch_size: 4,
            kappa: 2,
            key_dim: 8,
            feature_dim: 6,
            hidden_width: 8,
            steps: 1,
            work_dir: dir.path().to_path_buf(),
            ..MemorySweepConfig::default()
        };
        let r = memory_scaling_suite(&base, SweepAxis::Records, &[200, 400, 800]).unwrap();
        assert_eq!(r.fit.slope, (4 * 8 + 8) as f64);
        assert!(r.fit.intercept.abs() < 1e-6);
        let r = memory_scaling_suite(&base, SweepAxis::BatchSize, &[2, 4, 8]).unwrap();
        assert!((r.fit.slope - r.analytic_slope).abs() < 1e-6, "{:?}", r.fit);
        let r = memory_scaling_suite(&base, SweepAxis::Kappa, &[1, 2, 3]).unwrap();
        assert!((r.fit.slope - r.analytic_slope).abs() < 1e-6, "{:?}", r.fit);
        assert_eq!(r.samples.len(), 12);
        assert!(dir.path().join(MEMORY_FILE).exists());
        assert!(memory_scaling_suite(&base, SweepAxis::Kappa, &[2, 1]).unwrap_err().is_config_error());
    }
}
