//! Experiment configuration as TOML, with a content hash stamped on every
//! output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{NeedleConfig, RotatingConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{BaselineConfig, PayloadMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Needle,
    Rotating,
    /// Rotating-setting queries against a shared on-disk corpus.
    Corpus,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Needle => "needle",
            Setting::Rotating => "rotating",
            Setting::Corpus => "corpus",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Equal-width time bins over the test range (rotating and corpus).
    pub bins: usize,
    pub rows_per_bin: usize,
    /// Rows of fresh data scored at the end of a needle run.
    pub rows: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 20,
            rows_per_bin: 1000,
            rows: 10_000,
            batch_size: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Existing corpus file; when absent one is built in the output directory.
    pub path: Option<PathBuf>,
    pub records: usize,
    pub key_dim: usize,
    pub seed: u64,
    /// Per-tag byte budget for retrieved payloads; 0 means unlimited.
    pub retrieved_budget_bytes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            records: 10_000,
            key_dim: 64,
            seed: 0,
            retrieved_budget_bytes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default = "yes")]
    pub memory_probe: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub needle: NeedleConfig,
    #[serde(default)]
    pub rotating: RotatingConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Needle-setting defaults with history size `k`.
    pub fn needle(k: usize, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            setting: Setting::Needle,
            output_dir: output_dir.into(),
            repetitions: 1,
            memory_probe: true,
            model: ModelConfig::default(),
            train: TrainConfig::needle(),
            needle: NeedleConfig {
                history_size: k,
                ..NeedleConfig::default()
            },
            rotating: RotatingConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }

    /// Rotating-setting defaults with two hidden layers per head.
    pub fn rotating(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            setting: Setting::Rotating,
            model: ModelConfig {
                query_hidden_layers: 2,
                classifier_hidden_layers: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig::rotating(),
            ..Self::needle(8, output_dir)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|| "<document>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form, with
    /// the output directory blanked so relocated reruns hash the same.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be positive"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.model.validate()?;
        self.train.validate()?;
        match self.setting {
            Setting::Needle => {
                self.needle.validate()?;
                if self.train.kappa > self.needle.history_size {
                    return Err(Error::config(
                        "train.kappa",
                        format!("exceeds needle.history_size {}", self.needle.history_size),
                    ));
                }
            }
            Setting::Rotating | Setting::Corpus => {
                self.rotating.validate()?;
                self.baseline.validate()?;
                if self.setting == Setting::Rotating && self.train.kappa > self.rotating.history_size {
                    return Err(Error::config(
                        "train.kappa",
                        format!("exceeds rotating.history_size {}", self.rotating.history_size),
                    ));
                }
            }
        }
        if self.setting == Setting::Corpus {
            if self.corpus.key_dim == 0 {
                return Err(Error::config("corpus.key_dim", "must be positive"));
            }
            if self.corpus.path.is_none() && self.corpus.records < self.train.kappa {
                return Err(Error::config("corpus.records", "must be at least train.kappa"));
            }
        }
        if self.eval.bins == 0 || self.eval.batch_size == 0 {
            return Err(Error::config("eval.bins", "bins and batch_size must be positive"));
        }
        Ok(())
    }

    /// Seed of repetition `rep`; data generators shift by the same amount.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.train.seed.wrapping_add(rep as u64)
    }

    pub fn payload_mode(&self) -> PayloadMode {
        self.train.payload_mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::rotating("out/rot");
        cfg.train.max_grad_norm = f64::INFINITY;
        cfg.corpus.path = Some("c.nrac".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.train.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
        other = cfg.clone();
        other.output_dir = "elsewhere".into();
        assert_eq!(other.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = "setting = \"needle\"\noutput_dir = \"x\"\n[train]\nstpes = 3\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("stpes"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_field() {
        let text = "setting = \"needle\"\noutput_dir = \"x\"\n[train]\nmin_temperature = 2.0\nmax_temperature = 1.0\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("train.min_temperature"), "{err}");
        let text = "setting = \"needle\"\noutput_dir = \"x\"\n[train]\nquery_dropout_rate = 1.0\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("train.query_dropout_rate"), "{err}");
    }

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("setting = \"rotating\"\noutput_dir = \"o\"\n").unwrap();
        assert_eq!(cfg.repetitions, 1);
        assert!(cfg.memory_probe);
        assert_eq!(cfg.rotating, RotatingConfig::default());
    }
}
