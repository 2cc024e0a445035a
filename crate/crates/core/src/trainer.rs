//! One end-to-end training step with a sampled and a greedy retrieval pass,
//! the score-function pseudo-loss, and greedy evaluation.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{time_mask, CorpusReader, FetchedPayloads, KeyCache};
use crate::datagen::{NeedleBatch, RotatingBatch, RotatingGenerator};
use crate::error::{Error, Result};
use crate::memprobe::{MemTag, MemoryProbe, Reservation};
use crate::model::{row_argmax, ModelBundle, NoContextModel};
use crate::optim::{lr_schedule, AdamWConfig, OptimizerState};
use crate::params::{ParamGroup, ParamId};
use crate::retrieval::{retrieve_batch, selection_entropy_node, selection_log_prob, KeySource, PerRowKeys, RetrievalOutcome, RowKeys, SharedKeys};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    Full,
    LabelOnly,
}

/// What is subtracted from the sampled-pass loss in the pseudo-loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Greedy,
    None,
    Constant,
}

/// Which pass's classifier loss is differentiated directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectLossPath {
    Greedy,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduleKind {
    Constant,
    WarmupCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub retrieval_lr_multiplier: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub lr_schedule: LrScheduleKind,
    pub warmup_fraction: f64,
    pub lr_floor_fraction: f64,
    pub kappa: usize,
    pub max_temperature: f64,
    pub min_temperature: f64,
    pub cls_stage_dropout_rate: f64,
    pub query_dropout_rate: f64,
    pub payload_mode: PayloadMode,
    pub entropy_regularizer_weight: f64,
    pub baseline: BaselineMode,
    /// Subtracted from the sampled loss when `baseline = "constant"`.
    pub baseline_constant: f64,
    pub direct_loss_path: DirectLossPath,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 256,
            base_lr: 1e-3,
            retrieval_lr_multiplier: 10.0,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
            lr_schedule: LrScheduleKind::WarmupCosine,
            warmup_fraction: 0.1,
            lr_floor_fraction: 0.1,
            kappa: 4,
            max_temperature: 0.01,
            min_temperature: 0.001,
            cls_stage_dropout_rate: 0.0,
            query_dropout_rate: 0.0,
            payload_mode: PayloadMode::Full,
            entropy_regularizer_weight: 0.0,
            baseline: BaselineMode::Greedy,
            baseline_constant: 0.0,
            direct_loss_path: DirectLossPath::Greedy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Plain AdamW at a constant rate with unit temperature and no extra
    /// tricks, as used for the synthetic settings.
    pub fn plain(steps: u64, batch_size: usize, base_lr: f64, kappa: usize) -> Self {
        Self {
            steps,
            batch_size,
            base_lr,
            retrieval_lr_multiplier: 1.0,
            weight_decay: 0.01,
            max_grad_norm: f64::INFINITY,
            lr_schedule: LrScheduleKind::Constant,
            kappa,
            max_temperature: 1.0,
            min_temperature: 1.0,
            ..Self::default()
        }
    }

    /// Needle-setting defaults: 4k steps, batch 1000, lr 2e-4, κ = 1.
    pub fn needle() -> Self {
        Self::plain(4000, 1000, 2e-4, 1)
    }

    /// Rotating-setting defaults: 2500 steps, batch 4096, lr 5e-5, κ = 16.
    pub fn rotating() -> Self {
        Self::plain(2500, 4096, 5e-5, 16)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.kappa == 0 {
            return Err(Error::config("train.kappa", "must be positive"));
        }
        positive("train.base_lr", self.base_lr)?;
        positive("train.retrieval_lr_multiplier", self.retrieval_lr_multiplier)?;
        positive("train.min_temperature", self.min_temperature)?;
        positive("train.max_temperature", self.max_temperature)?;
        if self.min_temperature > self.max_temperature {
            return Err(Error::config(
                "train.min_temperature",
                format!("{} exceeds max_temperature {}", self.min_temperature, self.max_temperature),
            ));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("train.weight_decay", "must be finite and nonnegative"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("train.max_grad_norm", "must be positive (inf disables clipping)"));
        }
        for (field, rate) in [
            ("train.cls_stage_dropout_rate", self.cls_stage_dropout_rate),
            ("train.query_dropout_rate", self.query_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {rate}")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("train.warmup_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor_fraction) {
            return Err(Error::config("train.lr_floor_fraction", "must lie in [0, 1]"));
        }
        if !self.entropy_regularizer_weight.is_finite() || self.entropy_regularizer_weight < 0.0 {
            return Err(Error::config("train.entropy_regularizer_weight", "must be finite and nonnegative"));
        }
        if !self.baseline_constant.is_finite() {
            return Err(Error::config("train.baseline_constant", "must be finite"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.base_lr,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamWConfig::default()
        }
    }

    /// Base learning-rate multiplier for the update made at `step` (0-based).
    pub fn lr_scale(&self, step: u64) -> Result<f64> {
        match self.lr_schedule {
            LrScheduleKind::Constant => Ok(1.0),
            LrScheduleKind::WarmupCosine => {
                lr_schedule((step + 1).min(self.steps), self.steps, self.warmup_fraction, self.lr_floor_fraction)
            }
        }
    }

    pub fn group_scale(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Retrieval => self.retrieval_lr_multiplier,
            ParamGroup::Other => 1.0,
        }
    }
}

/// Geometric interpolation `max · (min/max)^(step/total)`.
pub fn temperature_at(step: u64, total_steps: u64, max_temperature: f64, min_temperature: f64) -> Result<f64> {
    if !(min_temperature > 0.0 && max_temperature >= min_temperature) {
        return Err(Error::invalid(format!(
            "temperatures must satisfy max >= min > 0, got max {max_temperature} min {min_temperature}"
        )));
    }
    if total_steps == 0 || step == 0 {
        return Ok(max_temperature);
    }
    if step >= total_steps {
        return Ok(min_temperature);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(max_temperature * (min_temperature / max_temperature).powf(frac))
}

/// Bernoulli(`rate`) flag per row; all false outside training.
pub fn cls_stage_dropout_mask(rows: usize, rate: f64, training: bool, rng: &mut Rng) -> Vec<bool> {
    bernoulli_flags(rows, rate, training, rng)
}

/// Bernoulli(`rate`) flag per retrieved item (`rows · κ`); all false outside
/// training. Log-probabilities of the selection are unaffected.
pub fn query_dropout_mask(rows: usize, kappa: usize, rate: f64, training: bool, rng: &mut Rng) -> Vec<bool> {
    bernoulli_flags(rows * kappa, rate, training, rng)
}

fn bernoulli_flags(n: usize, rate: f64, training: bool, rng: &mut Rng) -> Vec<bool> {
    if !training || rate <= 0.0 {
        return vec![false; n];
    }
    (0..n).map(|_| rng.random::<f64>() < rate).collect()
}

/// Where the classifier inputs of retrieved items come from.
#[derive(Clone)]
pub enum Payloads {
    /// `[rows, items, width]` already in classifier layout.
    InMemory { data: Arc<Vec<f32>>, items: usize, width: usize },
    /// Features and labels fetched from the corpus file by index.
    Corpus {
        reader: Arc<CorpusReader>,
        mode: PayloadMode,
        classes: usize,
    },
}

impl Payloads {
    pub fn width(&self) -> usize {
        match self {
            Payloads::InMemory { width, .. } => *width,
            Payloads::Corpus { reader, mode, classes } => payload_width(*mode, reader.header().feature_dim as usize, *classes),
        }
    }
}

/// Width of one retrieved item as the classifier sees it.
pub fn payload_width(mode: PayloadMode, feature_dim: usize, classes: usize) -> usize {
    match mode {
        PayloadMode::Full => feature_dim + classes,
        PayloadMode::LabelOnly => classes,
    }
}

fn push_payload(out: &mut Vec<f32>, mode: PayloadMode, features: &[f32], label: usize, classes: usize) {
    if mode == PayloadMode::Full {
        out.extend_from_slice(features);
    }
    let start = out.len();
    out.resize(start + classes, 0.0);
    out[start + label] = 1.0;
}

/// Holds the memory charge of one pass's retrieved payloads.
enum PayloadHold {
    Fetched(#[allow(dead_code)] FetchedPayloads),
    Reserved(#[allow(dead_code)] Reservation),
}

/// Inputs, labels and retrievable history for one step.
#[derive(Clone)]
pub struct TrainBatch {
    /// `[B, input_dim]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub keys: Arc<dyn KeySource>,
    pub payloads: Payloads,
    /// Known-correct item per row, for the selection diagnostic.
    pub targets: Option<Vec<usize>>,
}

impl TrainBatch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn from_needle(b: &NeedleBatch) -> Result<Self> {
        let keys = PerRowKeys::new(Arc::new(b.keys.clone()), b.batch_size, b.history_size, b.key_dim)?;
        Ok(Self {
            inputs: Tensor::matrix(b.batch_size, b.key_dim, b.inputs.clone())?,
            labels: b.labels.clone(),
            keys: Arc::new(keys),
            payloads: Payloads::InMemory {
                data: Arc::new(b.items.clone()),
                items: b.history_size,
                width: b.bitstring_length,
            },
            targets: Some(b.needle.clone()),
        })
    }

    /// Histories double as keys; payloads carry features and/or a one-hot label.
    pub fn from_rotating(b: &RotatingBatch, mode: PayloadMode) -> Result<Self> {
        let (k, f) = (b.history_size, b.feature_dim);
        let keys = PerRowKeys::new(Arc::new(b.history_inputs.clone()), b.batch_size, k, f)?;
        let width = payload_width(mode, f, 2);
        let mut data = Vec::with_capacity(b.batch_size * k * width);
        for (n, &y) in b.history_labels.iter().enumerate() {
            push_payload(&mut data, mode, &b.history_inputs[n * f..(n + 1) * f], y, 2);
        }
        Ok(Self {
            inputs: Tensor::matrix(b.batch_size, f, b.inputs.clone())?,
            labels: b.labels.clone(),
            keys: Arc::new(keys),
            payloads: Payloads::InMemory {
                data: Arc::new(data),
                items: k,
                width,
            },
            targets: None,
        })
    }

    /// Rows retrieve from a shared on-disk corpus, each restricted to
    /// records strictly older than its own timestamp.
    pub fn from_corpus(
        inputs: Tensor,
        labels: Vec<usize>,
        times: &[f64],
        cache: Arc<KeyCache>,
        reader: Arc<CorpusReader>,
        mode: PayloadMode,
    ) -> Result<Self> {
        if times.len() != labels.len() || inputs.dims2()?.0 != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "corpus batch",
                left: inputs.shape().to_vec(),
                right: vec![labels.len(), times.len()],
            });
        }
        let masks = times.iter().map(|&t| time_mask(&cache, t)).collect();
        let classes = reader.header().label_cardinality as usize;
        Ok(Self {
            inputs,
            labels,
            keys: Arc::new(SharedKeys::new(cache, masks)),
            payloads: Payloads::Corpus { reader, mode, classes },
            targets: None,
        })
    }

    /// Classifier inputs `[rows, κ·P]` for the chosen indices of the given
    /// batch rows, charged to [`MemTag::Retrieved`] while the hold lives.
    fn gather(&self, rows: &[usize], chosen: &[&[usize]], probe: &MemoryProbe) -> Result<(Tensor, PayloadHold)> {
        let kappa = chosen.first().map_or(0, |c| c.len());
        let width = self.payloads.width();
        let mut out = Vec::with_capacity(rows.len() * kappa * width);
        let hold = match &self.payloads {
            Payloads::InMemory { data, items, width } => {
                let res = probe.reserve(MemTag::Retrieved, 4 * rows.len() * kappa * width)?;
                for (&r, idx) in rows.iter().zip(chosen) {
                    for &i in *idx {
                        let at = (r * items + i) * width;
                        out.extend_from_slice(&data[at..at + width]);
                    }
                }
                PayloadHold::Reserved(res)
            }
            Payloads::Corpus { reader, mode, classes } => {
                let flat: Vec<usize> = chosen.iter().flat_map(|c| c.iter().copied()).collect();
                let fetched = reader.fetch_payloads(&flat, probe)?;
                let d = fetched.feature_dim;
                for (slot, &label) in fetched.labels.iter().enumerate() {
                    let label = label as usize;
                    if label >= *classes {
                        return Err(Error::LabelOutOfRange { label, classes: *classes });
                    }
                    push_payload(&mut out, *mode, &fetched.features[slot * d..(slot + 1) * d], label, *classes);
                }
                PayloadHold::Fetched(fetched)
            }
        };
        Ok((Tensor::from_parts(vec![rows.len(), kappa * width], out), hold))
    }
}

/// A subset of another source's rows.
struct RowSubset {
    inner: Arc<dyn KeySource>,
    rows: Vec<usize>,
}

impl KeySource for RowSubset {
    fn key_dim(&self) -> usize {
        self.inner.key_dim()
    }
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn items(&self, row: usize) -> usize {
        self.inner.items(self.rows[row])
    }
    fn row(&self, row: usize) -> RowKeys<'_> {
        self.inner.row(self.rows[row])
    }
}

/// Independent generator streams for retrieval sampling and dropout.
#[derive(Clone, Debug)]
pub struct StepRng {
    pub sampling: Rng,
    pub dropout: Rng,
}

impl StepRng {
    pub fn new(seed: u64) -> Self {
        Self {
            sampling: rng::stream(seed, streams::SAMPLING),
            dropout: rng::stream(seed, streams::DROPOUT),
        }
    }
}

/// One step's losses, accuracies and schedule values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean cross-entropy of the sampled retrieval pass.
    pub loss_sampled: f64,
    /// Mean cross-entropy of the greedy retrieval pass.
    pub loss_greedy: f64,
    /// Accuracy of the greedy pass.
    pub accuracy: f64,
    /// Mean selection-distribution entropy per retrieval slot.
    pub selection_entropy: f64,
    /// Mean `-log p` of the known-correct item under the first query.
    pub selection_loss: Option<f64>,
    pub temperature: f64,
    pub lr_scale: f64,
    pub retrieval_lr_scale: f64,
    pub grad_norm: f64,
    pub skipped_rows: usize,
    pub peak_logits_bytes: usize,
    pub peak_retrieved_bytes: usize,
}

/// Gradients of one step plus its metrics (optimizer fields unset).
pub struct StepGradients {
    pub grads: Vec<(ParamId, Tensor)>,
    pub metrics: MetricsRow,
    pub outcomes: Vec<RetrievalOutcome>,
}

fn mean(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&v| f64::from(v)).sum::<f64>() / xs.len() as f64
}

fn subset_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (n, cols) = t.dims2()?;
    if rows.len() == n {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), cols, out)
}

/// Forward passes, pseudo-loss and backward for one batch; no update.
///
/// Rows with fewer than κ retrievable items are skipped and counted. The
/// pass named by `direct_loss_path` is differentiated directly; the other
/// is evaluated without a tape and its payloads released before the
/// differentiated pass fetches its own.
pub fn compute_step_gradients(
    bundle: &ModelBundle,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    step: u64,
    rngs: &mut StepRng,
    probe: &MemoryProbe,
) -> Result<StepGradients> {
    let kappa = cfg.kappa;
    if kappa != bundle.shape.kappa {
        return Err(Error::config(
            "train.kappa",
            format!("{kappa} differs from the model's {}", bundle.shape.kappa),
        ));
    }
    if batch.payloads.width() != bundle.shape.payload_dim {
        return Err(Error::invalid(format!(
            "payload width {} differs from the model's {}",
            batch.payloads.width(),
            bundle.shape.payload_dim
        )));
    }
    let kept: Vec<usize> = (0..batch.rows())
        .filter(|&r| batch.keys.row(r).active.len() >= kappa)
        .collect();
    let skipped = batch.rows() - kept.len();
    if kept.is_empty() {
        let available = (0..batch.rows()).map(|r| batch.keys.row(r).active.len()).max().unwrap_or(0);
        return Err(Error::InsufficientItems { kappa, available });
    }
    let keys: Arc<dyn KeySource> = if skipped == 0 {
        batch.keys.clone()
    } else {
        Arc::new(RowSubset {
            inner: batch.keys.clone(),
            rows: kept.clone(),
        })
    };
    let labels: Vec<usize> = kept.iter().map(|&r| batch.labels[r]).collect();
    let targets: Option<Vec<usize>> = batch.targets.as_ref().map(|t| kept.iter().map(|&r| t[r]).collect());
    let rows = kept.len();
    let inv_rows = 1.0 / rows as f32;

    let temperature = temperature_at(step, cfg.steps, cfg.max_temperature, cfg.min_temperature)? as f32;
    let mut g = Graph::new();
    let x = g.constant(subset_rows(&batch.inputs, &kept)?);
    let h = bundle.stem(&mut g, x)?;
    let q = bundle.queries(&mut g, h, x)?;
    let outcomes = retrieve_batch(
        g.value(q).data(),
        kappa,
        keys.as_ref(),
        temperature,
        &mut rngs.sampling,
        probe,
        targets.as_deref(),
    )?;
    let stem_drop = cls_stage_dropout_mask(rows, cfg.cls_stage_dropout_rate, true, &mut rngs.dropout);
    let item_drop = query_dropout_mask(rows, kappa, cfg.query_dropout_rate, true, &mut rngs.dropout);

    let sampled: Vec<&[usize]> = outcomes.iter().map(|o| o.sampled_indices.as_slice()).collect();
    let greedy: Vec<&[usize]> = outcomes.iter().map(|o| o.greedy_indices.as_slice()).collect();
    let (direct_idx, other_idx) = match cfg.direct_loss_path {
        DirectLossPath::Greedy => (&greedy, &sampled),
        DirectLossPath::Sampled => (&sampled, &greedy),
    };

    // Pass without a tape: only per-row losses and predictions survive it.
    let (other_nll, other_pred) = {
        let mut g2 = Graph::new();
        let h2 = g2.constant(g.value(h).clone());
        let (payload, hold) = batch.gather(&kept, other_idx, probe)?;
        let p = g2.constant(payload);
        let lp = bundle.classify(&mut g2, h2, p, Some(&stem_drop), Some(&item_drop))?;
        let nll = g2.nll_rows(lp, &labels)?;
        let out = (g2.value(nll).data().to_vec(), row_argmax(g2.value(lp))?);
        drop(hold);
        out
    };

    let (payload, hold) = batch.gather(&kept, direct_idx, probe)?;
    let p = g.constant(payload);
    let lp = bundle.classify(&mut g, h, p, Some(&stem_drop), Some(&item_drop))?;
    let nll = g.nll_rows(lp, &labels)?;
    let direct_nll = g.value(nll).data().to_vec();
    let direct_pred = row_argmax(g.value(lp))?;

    let (l_s, l_g, greedy_pred) = match cfg.direct_loss_path {
        DirectLossPath::Greedy => (other_nll, direct_nll, direct_pred),
        DirectLossPath::Sampled => (direct_nll, other_nll, other_pred),
    };
    let loss_sampled = mean(&l_s);
    let loss_greedy = mean(&l_g);
    if !loss_sampled.is_finite() || !loss_greedy.is_finite() {
        return Err(Error::NonFiniteLoss {
            what: if loss_sampled.is_finite() { "greedy-pass loss" } else { "sampled-pass loss" },
            step,
        });
    }
    let advantages: Vec<f32> = l_s
        .iter()
        .zip(&l_g)
        .map(|(&s, &gr)| {
            let base = match cfg.baseline {
                BaselineMode::Greedy => gr,
                BaselineMode::None => 0.0,
                BaselineMode::Constant => cfg.baseline_constant as f32,
            };
            (s - base) * inv_rows
        })
        .collect();

    let direct = g.mean(nll);
    let log_prob = selection_log_prob(&mut g, q, keys.clone(), &outcomes, kappa, temperature)?;
    let rfc = g.dot_const(log_prob, advantages)?;
    let mut total = g.add(direct, rfc)?;
    if cfg.entropy_regularizer_weight > 0.0 {
        let ent = selection_entropy_node(&mut g, q, keys.clone(), &outcomes, kappa, temperature)?;
        let w = -(cfg.entropy_regularizer_weight as f32) * inv_rows;
        let reg = g.dot_const(ent, vec![w; rows])?;
        total = g.add(total, reg)?;
    }
    if !g.value(total).all_finite() {
        return Err(Error::NonFiniteLoss { what: "training objective", step });
    }
    let grads = g.backward(total)?.param_grads();
    drop(hold);

    let correct = greedy_pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    let selection_entropy =
        outcomes.iter().map(|o| o.total_entropy()).sum::<f64>() / (rows * kappa) as f64;
    let selection_loss = targets.as_ref().map(|_| {
        outcomes
            .iter()
            .map(|o| -f64::from(o.target_log_prob.unwrap_or(f32::NEG_INFINITY)))
            .sum::<f64>()
            / rows as f64
    });
    let snap = probe.snapshot();
    Ok(StepGradients {
        grads,
        metrics: MetricsRow {
            step,
            loss_sampled,
            loss_greedy,
            accuracy: correct as f64 / rows as f64,
            selection_entropy,
            selection_loss,
            temperature: f64::from(temperature),
            lr_scale: 0.0,
            retrieval_lr_scale: 0.0,
            grad_norm: 0.0,
            skipped_rows: skipped,
            peak_logits_bytes: snap.peak_of(MemTag::Logits),
            peak_retrieved_bytes: snap.peak_of(MemTag::Retrieved),
        },
        outcomes,
    })
}

/// One full step: gradients, clipping, group learning rates and the AdamW
/// update.
pub fn training_step(
    bundle: &mut ModelBundle,
    opt: &mut OptimizerState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    step: u64,
    rngs: &mut StepRng,
    probe: &MemoryProbe,
) -> Result<MetricsRow> {
    let out = compute_step_gradients(bundle, batch, cfg, step, rngs, probe)?;
    let lr_scale = cfg.lr_scale(step)?;
    let report = opt.step(&mut bundle.params, &out.grads, lr_scale, |grp| cfg.group_scale(grp))?;
    let mut m = out.metrics;
    m.lr_scale = lr_scale;
    m.retrieval_lr_scale = lr_scale * cfg.retrieval_lr_multiplier;
    m.grad_norm = report.grad_norm;
    Ok(m)
}

/// Runs `cfg.steps` steps, drawing each batch from `next_batch` with the
/// training-data stream.
pub fn train(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    probe: &MemoryProbe,
    mut next_batch: impl FnMut(u64, &mut Rng) -> Result<TrainBatch>,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<(OptimizerState, Vec<MetricsRow>)> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer(), &bundle.params);
    let mut data = rng::stream(cfg.seed, streams::TRAIN_DATA);
    let mut rngs = StepRng::new(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = next_batch(step, &mut data)?;
        probe.reset_peaks();
        let m = training_step(bundle, &mut opt, &batch, cfg, step, &mut rngs, probe)?;
        on_step(&m);
        rows.push(m);
    }
    Ok((opt, rows))
}

/// Greedy-retrieval predictions for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    pub rows: usize,
    pub correct: usize,
    pub loss_sum: f64,
}

pub fn evaluate_batch(bundle: &ModelBundle, batch: &TrainBatch, probe: &MemoryProbe) -> Result<EvalBatch> {
    let kappa = bundle.shape.kappa;
    let kept: Vec<usize> = (0..batch.rows())
        .filter(|&r| batch.keys.row(r).active.len() >= kappa)
        .collect();
    if kept.is_empty() {
        return Ok(EvalBatch {
            rows: 0,
            correct: 0,
            loss_sum: 0.0,
        });
    }
    let keys: Arc<dyn KeySource> = if kept.len() == batch.rows() {
        batch.keys.clone()
    } else {
        Arc::new(RowSubset {
            inner: batch.keys.clone(),
            rows: kept.clone(),
        })
    };
    let labels: Vec<usize> = kept.iter().map(|&r| batch.labels[r]).collect();
    let mut g = Graph::new();
    let x = g.constant(subset_rows(&batch.inputs, &kept)?);
    let h = bundle.stem(&mut g, x)?;
    let q = bundle.queries(&mut g, h, x)?;
    // Temperature and stream only affect the sampled indices, unused here.
    let mut unused = rng::stream(0, 0);
    let outcomes = retrieve_batch(g.value(q).data(), kappa, keys.as_ref(), 1.0, &mut unused, probe, None)?;
    let greedy: Vec<&[usize]> = outcomes.iter().map(|o| o.greedy_indices.as_slice()).collect();
    let (payload, _hold) = batch.gather(&kept, &greedy, probe)?;
    let p = g.constant(payload);
    let lp = bundle.classify(&mut g, h, p, None, None)?;
    Ok(score(&g, lp, &labels)?)
}

fn score(g: &Graph, lp: Var, labels: &[usize]) -> Result<EvalBatch> {
    let t = g.value(lp);
    let (_, classes) = t.dims2()?;
    let pred = row_argmax(t)?;
    let mut loss_sum = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss_sum -= f64::from(t.data()[r * classes + y]);
    }
    Ok(EvalBatch {
        rows: labels.len(),
        correct: pred.iter().zip(labels).filter(|(p, y)| p == y).count(),
        loss_sum,
    })
}

pub fn evaluate_baseline_batch(model: &NoContextModel, inputs: &Tensor, labels: &[usize]) -> Result<EvalBatch> {
    let mut g = Graph::new();
    let x = g.constant(inputs.clone());
    let lp = model.log_probs(&mut g, x)?;
    score(&g, lp, labels)
}

/// Accuracy and cross-entropy for one time bin; absent when it has no rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinResult {
    pub bin: [f64; 2],
    pub rows: usize,
    pub context_accuracy: Option<f64>,
    pub context_loss: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub baseline_loss: Option<f64>,
}

/// Greedy evaluation of the context model, and optionally the no-context
/// baseline, on fresh rotating-setting data drawn per bin.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_timebinned(
    bundle: &ModelBundle,
    baseline: Option<&NoContextModel>,
    generator: &RotatingGenerator,
    bins: &[[f64; 2]],
    rows_per_bin: usize,
    batch_size: usize,
    mode: PayloadMode,
    rng: &mut Rng,
    probe: &MemoryProbe,
) -> Result<Vec<BinResult>> {
    for w in bins.windows(2) {
        if w[1][0] < w[0][1] {
            return Err(Error::invalid(format!("bins {:?} and {:?} overlap or are unordered", w[0], w[1])));
        }
    }
    let batch_size = batch_size.max(1);
    let mut results = Vec::with_capacity(bins.len());
    for &bin in bins {
        let mut ctx = EvalBatch { rows: 0, correct: 0, loss_sum: 0.0 };
        let mut base = ctx.clone();
        let mut left = rows_per_bin;
        while left > 0 {
            let n = left.min(batch_size);
            left -= n;
            let raw = generator.batch(n, bin, rng)?;
            let e = evaluate_batch(bundle, &TrainBatch::from_rotating(&raw, mode)?, probe)?;
            ctx.rows += e.rows;
            ctx.correct += e.correct;
            ctx.loss_sum += e.loss_sum;
            if let Some(m) = baseline {
                let x = Tensor::matrix(n, raw.feature_dim, raw.inputs)?;
                let e = evaluate_baseline_batch(m, &x, &raw.labels)?;
                base.rows += e.rows;
                base.correct += e.correct;
                base.loss_sum += e.loss_sum;
            }
        }
        let acc = |e: &EvalBatch| (e.rows > 0).then(|| e.correct as f64 / e.rows as f64);
        let loss = |e: &EvalBatch| (e.rows > 0).then(|| e.loss_sum / e.rows as f64);
        results.push(BinResult {
            bin,
            rows: ctx.rows,
            context_accuracy: acc(&ctx),
            context_loss: loss(&ctx),
            baseline_accuracy: baseline.and_then(|_| acc(&base)),
            baseline_loss: baseline.and_then(|_| loss(&base)),
        });
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden_width: 512,
            hidden_layers: 3,
            steps: 2500,
            batch_size: 4096,
            lr: 5e-5,
            weight_decay: 0.01,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::config("baseline.hidden_width", "width and layer count must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("baseline.steps", "steps and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("baseline.lr", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Supervised training of a plain MLP on `(X, Y)` pairs from `next_batch`.
/// Returns the per-step training loss.
pub fn train_no_context_baseline(
    cfg: &BaselineConfig,
    input_dim: usize,
    classes: usize,
    seed: u64,
    mut next_batch: impl FnMut(&mut Rng) -> Result<(Tensor, Vec<usize>)>,
) -> Result<(NoContextModel, Vec<f64>)> {
    cfg.validate()?;
    let mut model = NoContextModel::new(
        input_dim,
        cfg.hidden_width,
        cfg.hidden_layers,
        classes,
        &mut rng::stream(seed, streams::BASELINE_INIT),
    )?;
    let mut opt = OptimizerState::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let mut data = rng::stream(seed, streams::BASELINE_DATA);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (x, y) = next_batch(&mut data)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let lp = model.log_probs(&mut g, xv)?;
        let nll = g.nll_rows(lp, &y)?;
        let loss = g.mean(nll);
        let l = f64::from(g.value(loss).item());
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { what: "baseline loss", step });
        }
        let grads = g.backward(loss)?.param_grads();
        opt.step(&mut model.params, &grads, 1.0, |_| 1.0)?;
        losses.push(l);
    }
    Ok((model, losses))
}
