//! Learned discrete retrieval.
//!
//! Each query scores every visible key with a scaled dot product; κ indices
//! are then drawn sequentially from temperature softmaxes, with each drawn
//! index masked out of every later query's distribution. A greedy pass runs
//! the same iteration with argmax in place of sampling and its own masking.
//!
//! Logits for one query slot are materialized for the whole batch at once
//! and released before the next slot, so at most `B × K̃` logits are alive.
//! The gradient of the selection log-probability is recomputed in the
//! backward pass rather than retained.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{log_sum_exp, softmax_with_temperature, CustomOp, Graph, Var};
use crate::corpus::{KeyCache, TimeMask};
use crate::error::{Error, Result};
use crate::memprobe::{MemTag, MemoryProbe, TrackedVec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Keys visible to one batch row: all keys of its corpus plus the range of
/// indices that may be retrieved.
#[derive(Clone, Debug)]
pub struct RowKeys<'a> {
    pub keys: &'a [f32],
    pub active: Range<usize>,
}

/// Where a batch's keys come from.
pub trait KeySource: Send + Sync {
    fn key_dim(&self) -> usize;
    fn rows(&self) -> usize;
    /// Number of keys row `row` scores (its corpus size).
    fn items(&self, row: usize) -> usize;
    fn row(&self, row: usize) -> RowKeys<'_>;
}

/// Every row carries its own private history, all of it retrievable.
#[derive(Clone, Debug)]
pub struct PerRowKeys {
    keys: Arc<Vec<f32>>,
    rows: usize,
    items: usize,
    dim: usize,
}

impl PerRowKeys {
    pub fn new(keys: Arc<Vec<f32>>, rows: usize, items: usize, dim: usize) -> Result<Self> {
        if keys.len() != rows * items * dim {
            return Err(Error::ShapeMismatch {
                op: "per-row keys",
                left: vec![rows, items, dim],
                right: vec![keys.len()],
            });
        }
        Ok(Self { keys, rows, items, dim })
    }
}

impl KeySource for PerRowKeys {
    fn key_dim(&self) -> usize {
        self.dim
    }
    fn rows(&self) -> usize {
        self.rows
    }
    fn items(&self, _row: usize) -> usize {
        self.items
    }
    fn row(&self, row: usize) -> RowKeys<'_> {
        let n = self.items * self.dim;
        RowKeys {
            keys: &self.keys[row * n..(row + 1) * n],
            active: 0..self.items,
        }
    }
}

/// One shared key cache with a per-row time mask.
#[derive(Clone, Debug)]
pub struct SharedKeys {
    cache: Arc<KeyCache>,
    masks: Vec<Range<usize>>,
}

impl SharedKeys {
    pub fn new(cache: Arc<KeyCache>, masks: Vec<TimeMask>) -> Self {
        let masks = masks.into_iter().map(|m| m.active).collect();
        Self { cache, masks }
    }

    pub fn cache(&self) -> &KeyCache {
        &self.cache
    }
}

impl KeySource for SharedKeys {
    fn key_dim(&self) -> usize {
        self.cache.key_dim()
    }
    fn rows(&self) -> usize {
        self.masks.len()
    }
    fn items(&self, _row: usize) -> usize {
        self.cache.len()
    }
    fn row(&self, row: usize) -> RowKeys<'_> {
        RowKeys {
            keys: self.cache.keys(),
            active: self.masks[row].clone(),
        }
    }
}

/// Writes `q·k_n / √d` for active `n` and `-inf` elsewhere.
fn fill_logits(query: &[f32], keys: &RowKeys<'_>, d: usize, out: &mut [f32]) -> Result<()> {
    if query.len() != d {
        return Err(Error::ShapeMismatch {
            op: "logits",
            left: vec![query.len()],
            right: vec![d],
        });
    }
    let n = out.len();
    if keys.keys.len() != n * d || keys.active.end > n {
        return Err(Error::ShapeMismatch {
            op: "logits",
            left: vec![n, d],
            right: vec![keys.keys.len()],
        });
    }
    if keys.active.is_empty() {
        return Err(Error::FullyMasked);
    }
    out.fill(f32::NEG_INFINITY);
    let Range { start, end } = keys.active;
    let scale = 1.0 / (d as f32).sqrt();
    let dst = &mut out[start..end];
    for (o, k) in dst.iter_mut().zip(keys.keys[start * d..end * d].chunks_exact(d)) {
        *o = dot(query, k) * scale;
    }
    Ok(())
}

/// Dot product with eight independent partial sums so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Logits of one query against a key cache under a time mask.
pub fn compute_logits(query: &[f32], cache: &KeyCache, mask: &TimeMask, probe: &MemoryProbe) -> Result<TrackedVec<f32>> {
    let mut out = TrackedVec::filled(probe, MemTag::Logits, cache.len(), 0.0f32)?;
    let keys = RowKeys {
        keys: cache.keys(),
        active: mask.active.clone(),
    };
    fill_logits(query, &keys, cache.key_dim(), &mut out)?;
    Ok(out)
}

/// Queries for one input: `[κ, d]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<f32>,
    pub kappa: usize,
    pub dim: usize,
}

impl QuerySet {
    pub fn new(queries: Vec<f32>, kappa: usize, dim: usize) -> Result<Self> {
        if kappa == 0 || queries.len() != kappa * dim {
            return Err(Error::ShapeMismatch {
                op: "query set",
                left: vec![kappa, dim],
                right: vec![queries.len()],
            });
        }
        Ok(Self { queries, kappa, dim })
    }

    pub fn query(&self, m: usize) -> &[f32] {
        &self.queries[m * self.dim..(m + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalOutcome {
    pub sampled_indices: Vec<usize>,
    pub greedy_indices: Vec<usize>,
    /// Log-probability of each sampled index under its masked distribution.
    pub sampled_log_probs: Vec<f32>,
    /// Entropy of each query's masked sampling distribution.
    pub per_query_entropy: Vec<f32>,
    /// Log-probability the first query assigns to a known target index.
    pub target_log_prob: Option<f32>,
}

impl RetrievalOutcome {
    fn with_capacity(kappa: usize) -> Self {
        Self {
            sampled_indices: Vec::with_capacity(kappa),
            greedy_indices: Vec::with_capacity(kappa),
            sampled_log_probs: Vec::with_capacity(kappa),
            per_query_entropy: Vec::with_capacity(kappa),
            target_log_prob: None,
        }
    }

    pub fn total_log_prob(&self) -> f64 {
        self.sampled_log_probs.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn total_entropy(&self) -> f64 {
        self.per_query_entropy.iter().map(|&v| f64::from(v)).sum()
    }
}

/// Lowest-index argmax over finite entries.
fn argmax(u: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in u.iter().enumerate() {
        if v == f32::NEG_INFINITY {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Runs `f` with `excluded` entries of `u` set to `-inf`, then restores them.
fn with_excluded<T>(u: &mut [f32], excluded: &[usize], f: impl FnOnce(&mut [f32]) -> T) -> T {
    let saved: Vec<f32> = excluded.iter().map(|&i| std::mem::replace(&mut u[i], f32::NEG_INFINITY)).collect();
    let out = f(u);
    for (&i, v) in excluded.iter().zip(saved) {
        u[i] = v;
    }
    out
}

struct Draw {
    index: usize,
    log_prob: f64,
    entropy: f64,
    target_log_prob: Option<f64>,
}

/// Samples one index from `softmax(u / τ)` by inverse CDF. Overwrites `u`.
fn draw(u: &mut [f32], temperature: f64, rng: &mut Rng, target: Option<usize>) -> Result<Draw> {
    let max = u
        .iter()
        .filter(|v| **v != f32::NEG_INFINITY)
        .map(|&v| f64::from(v) / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMasked);
    }
    let target_z = target.map(|t| f64::from(u[t]) / temperature - max);
    let mut total = 0.0f64;
    let mut weighted = 0.0f64;
    let mut last_active = 0;
    for (i, v) in u.iter_mut().enumerate() {
        if *v == f32::NEG_INFINITY {
            continue;
        }
        let z = f64::from(*v) / temperature - max;
        let e = z.exp();
        total += e;
        weighted += e * z;
        *v = z as f32;
        last_active = i;
    }
    let log_total = total.ln();
    let entropy = log_total - weighted / total;
    let r: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0f64;
    let mut index = last_active;
    for (i, &z) in u.iter().enumerate() {
        if z == f32::NEG_INFINITY {
            continue;
        }
        cum += f64::from(z).exp();
        if cum > r {
            index = i;
            break;
        }
    }
    Ok(Draw {
        index,
        log_prob: f64::from(u[index]) - log_total,
        entropy,
        target_log_prob: target_z.map(|z| z - log_total),
    })
}

fn check_temperature(temperature: f32) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// One row's selection step for query slot `m`, given that row's logits.
fn select_into(
    u: &mut [f32],
    out: &mut RetrievalOutcome,
    temperature: f64,
    rng: &mut Rng,
    target: Option<usize>,
) -> Result<()> {
    let greedy = with_excluded(u, &out.greedy_indices, |u| argmax(u)).ok_or(Error::FullyMasked)?;
    let excluded = out.sampled_indices.clone();
    for &i in &excluded {
        u[i] = f32::NEG_INFINITY;
    }
    let first = out.sampled_indices.is_empty();
    let d = draw(u, temperature, rng, if first { target } else { None })?;
    out.greedy_indices.push(greedy);
    out.sampled_indices.push(d.index);
    out.sampled_log_probs.push(d.log_prob as f32);
    out.per_query_entropy.push(d.entropy as f32);
    if first {
        out.target_log_prob = d.target_log_prob.map(|v| v as f32);
    }
    Ok(())
}

/// Stochastic and greedy selection of κ distinct indices for one input.
pub fn sample_without_replacement(
    queries: &QuerySet,
    keys: &RowKeys<'_>,
    temperature: f32,
    rng: &mut Rng,
    probe: &MemoryProbe,
) -> Result<RetrievalOutcome> {
    check_temperature(temperature)?;
    let n = keys.keys.len() / queries.dim.max(1);
    let available = keys.active.len();
    if available < queries.kappa {
        return Err(Error::InsufficientItems {
            kappa: queries.kappa,
            available,
        });
    }
    let mut out = RetrievalOutcome::with_capacity(queries.kappa);
    for m in 0..queries.kappa {
        let mut u = TrackedVec::filled(probe, MemTag::Logits, n, 0.0f32)?;
        fill_logits(queries.query(m), keys, queries.dim, &mut u)?;
        select_into(&mut u, &mut out, f64::from(temperature), rng, None)?;
    }
    Ok(out)
}

/// Deterministic argmax selection with its own without-replacement masking.
pub fn greedy_select(queries: &QuerySet, keys: &RowKeys<'_>, probe: &MemoryProbe) -> Result<Vec<usize>> {
    let n = keys.keys.len() / queries.dim.max(1);
    let available = keys.active.len();
    if available < queries.kappa {
        return Err(Error::InsufficientItems {
            kappa: queries.kappa,
            available,
        });
    }
    let mut picked = Vec::with_capacity(queries.kappa);
    let mut u = TrackedVec::filled(probe, MemTag::Logits, n, 0.0f32)?;
    for m in 0..queries.kappa {
        fill_logits(queries.query(m), keys, queries.dim, &mut u)?;
        let i = with_excluded(&mut u, &picked, |u| argmax(u)).ok_or(Error::FullyMasked)?;
        picked.push(i);
    }
    Ok(picked)
}

/// Selection for every row of a batch.
///
/// `queries` is `[B, κ·d]`. For each query slot the logits of all rows are
/// held in one `[B, K̃]` block charged to [`MemTag::Logits`], then released.
/// `targets` optionally names a known-correct index per row whose
/// log-probability under the first query is reported.
pub fn retrieve_batch(
    queries: &[f32],
    kappa: usize,
    source: &dyn KeySource,
    temperature: f32,
    rng: &mut Rng,
    probe: &MemoryProbe,
    targets: Option<&[usize]>,
) -> Result<Vec<RetrievalOutcome>> {
    check_temperature(temperature)?;
    let d = source.key_dim();
    let rows = source.rows();
    if kappa == 0 || queries.len() != rows * kappa * d {
        return Err(Error::ShapeMismatch {
            op: "retrieve_batch",
            left: vec![rows, kappa * d],
            right: vec![queries.len()],
        });
    }
    for r in 0..rows {
        let available = source.row(r).active.len();
        if available < kappa {
            return Err(Error::InsufficientItems { kappa, available });
        }
    }
    let offsets: Vec<usize> = (0..rows)
        .scan(0, |acc, r| {
            let o = *acc;
            *acc += source.items(r);
            Some(o)
        })
        .collect();
    let total: usize = (0..rows).map(|r| source.items(r)).sum();
    let mut outcomes: Vec<RetrievalOutcome> = (0..rows).map(|_| RetrievalOutcome::with_capacity(kappa)).collect();
    let t = f64::from(temperature);
    for m in 0..kappa {
        let mut block = TrackedVec::filled(probe, MemTag::Logits, total, 0.0f32)?;
        for r in 0..rows {
            let keys = source.row(r);
            let q = &queries[(r * kappa + m) * d..(r * kappa + m + 1) * d];
            let u = &mut block[offsets[r]..offsets[r] + source.items(r)];
            fill_logits(q, &keys, d, u)?;
        }
        for (r, out) in outcomes.iter_mut().enumerate() {
            let u = &mut block[offsets[r]..offsets[r] + source.items(r)];
            select_into(u, out, t, rng, targets.map(|ts| ts[r]))?;
        }
    }
    Ok(outcomes)
}

/// `-Σ p log p` with `0 log 0 = 0`.
pub fn selection_entropy(probs: &[f32]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = f64::from(p);
            -p * p.ln()
        })
        .sum()
}

/// `-log probs[true_index]`: how far the selection distribution is from the
/// known-correct item. Reported as a metric only.
pub fn selection_loss_diagnostic(probs: &[f32], true_index: usize) -> f64 {
    -f64::from(probs[true_index]).ln()
}

/// Selection distribution of one query, for diagnostics.
pub fn selection_probs(query: &[f32], keys: &RowKeys<'_>, temperature: f32) -> Result<Vec<f32>> {
    let d = query.len();
    let mut u = vec![0.0f32; keys.keys.len() / d.max(1)];
    fill_logits(query, keys, d, &mut u)?;
    softmax_with_temperature(&u, temperature)
}

/// `α q̃ + (1 − α) q_sim` on the tape, with `α = sigmoid(alpha_logit)` so
/// the learned coefficient stays inside `(0, 1)`.
pub fn residual_query_blend(g: &mut Graph, learned: Var, similarity: Var, alpha_logit: Var) -> Result<Var> {
    let alpha = g.sigmoid(alpha_logit);
    g.blend(learned, similarity, alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SelectionQuantity {
    LogProb,
    Entropy,
}

/// Differentiable per-row selection statistic as a function of the queries.
struct SelectionOp {
    source: Arc<dyn KeySource>,
    sampled: Vec<Vec<usize>>,
    kappa: usize,
    temperature: f64,
    quantity: SelectionQuantity,
}

impl CustomOp for SelectionOp {
    fn name(&self) -> &'static str {
        match self.quantity {
            SelectionQuantity::LogProb => "selection_log_prob",
            SelectionQuantity::Entropy => "selection_entropy",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = self.source.key_dim();
        let rows = self.source.rows();
        let kappa = self.kappa;
        let scale = 1.0 / ((d as f64).sqrt() * self.temperature);
        let mut dq = vec![0.0f32; rows * kappa * d];
        let mut u = Vec::new();
        let mut acc = vec![0.0f32; d];
        let tau = self.temperature;
        for r in 0..rows {
            let g = f64::from(grad.data()[r]);
            if g == 0.0 {
                continue;
            }
            let keys = self.source.row(r);
            let Range { start, end } = keys.active.clone();
            u.resize(self.source.items(r), 0.0f32);
            for m in 0..kappa {
                let q = &inputs[0].data()[(r * kappa + m) * d..(r * kappa + m + 1) * d];
                fill_logits(q, &keys, d, &mut u).expect("validated in forward");
                for &i in &self.sampled[r][..m] {
                    u[i] = f32::NEG_INFINITY;
                }
                let lse = log_sum_exp(&u[start..end], tau as f32).expect("non-empty in forward");
                // Overwrite active logits with log-probabilities.
                let want_entropy = self.quantity == SelectionQuantity::Entropy;
                let mut entropy = 0.0f64;
                for v in &mut u[start..end] {
                    if *v != f32::NEG_INFINITY {
                        let lp = f64::from(*v) / tau - lse;
                        if want_entropy {
                            entropy -= lp.exp() * lp;
                        }
                        *v = lp as f32;
                    }
                }
                // dQ/dq = scale · Σ_n c_n k_n.
                acc.fill(0.0);
                for (i, &lp) in u[start..end].iter().enumerate() {
                    if lp == f32::NEG_INFINITY {
                        continue;
                    }
                    let lp = f64::from(lp);
                    let p = lp.exp();
                    let c = match self.quantity {
                        SelectionQuantity::LogProb => -p,
                        SelectionQuantity::Entropy => -p * (lp + entropy),
                    } as f32;
                    if c == 0.0 {
                        continue;
                    }
                    let k = &keys.keys[(start + i) * d..(start + i + 1) * d];
                    for (a, &kv) in acc.iter_mut().zip(k) {
                        *a += c * kv;
                    }
                }
                if self.quantity == SelectionQuantity::LogProb {
                    let s = self.sampled[r][m];
                    for (a, &kv) in acc.iter_mut().zip(&keys.keys[s * d..(s + 1) * d]) {
                        *a += kv;
                    }
                }
                let gs = (g * scale) as f32;
                let dst = &mut dq[(r * kappa + m) * d..(r * kappa + m + 1) * d];
                for (o, &a) in dst.iter_mut().zip(acc.iter()) {
                    *o += gs * a;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![rows, kappa * d], dq))]
    }
}

fn selection_node(
    g: &mut Graph,
    queries: Var,
    source: Arc<dyn KeySource>,
    outcomes: &[RetrievalOutcome],
    kappa: usize,
    temperature: f32,
    quantity: SelectionQuantity,
) -> Result<Var> {
    let rows = source.rows();
    let qv = g.value(queries);
    if outcomes.len() != rows || qv.len() != rows * kappa * source.key_dim() {
        return Err(Error::ShapeMismatch {
            op: "selection",
            left: qv.shape().to_vec(),
            right: vec![outcomes.len(), kappa, source.key_dim()],
        });
    }
    let values: Vec<f32> = outcomes
        .iter()
        .map(|o| match quantity {
            SelectionQuantity::LogProb => o.total_log_prob() as f32,
            SelectionQuantity::Entropy => o.total_entropy() as f32,
        })
        .collect();
    let op = SelectionOp {
        source,
        sampled: outcomes.iter().map(|o| o.sampled_indices.clone()).collect(),
        kappa,
        temperature: f64::from(temperature),
        quantity,
    };
    Ok(g.custom(&[queries], Tensor::vector(values), Box::new(op)))
}

/// Per-row `Σ_m log p_m(i_m)` for the sampled indices, shape `[B]`,
/// differentiable with respect to the `[B, κ·d]` queries.
pub fn selection_log_prob(
    g: &mut Graph,
    queries: Var,
    source: Arc<dyn KeySource>,
    outcomes: &[RetrievalOutcome],
    kappa: usize,
    temperature: f32,
) -> Result<Var> {
    selection_node(g, queries, source, outcomes, kappa, temperature, SelectionQuantity::LogProb)
}

/// Per-row `Σ_m H_m` of the sampling distributions, shape `[B]`.
pub fn selection_entropy_node(
    g: &mut Graph,
    queries: Var,
    source: Arc<dyn KeySource>,
    outcomes: &[RetrievalOutcome],
    kappa: usize,
    temperature: f32,
) -> Result<Var> {
    selection_node(g, queries, source, outcomes, kappa, temperature, SelectionQuantity::Entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::testing::finite_difference_check;

    fn row(keys: &[f32], d: usize) -> RowKeys<'_> {
        RowKeys {
            keys,
            active: 0..keys.len() / d,
        }
    }

    /// Keys `√d · e_n` make the logits equal the query's coordinates.
    fn basis_keys(n: usize) -> Vec<f32> {
        let s = (n as f32).sqrt();
        let mut k = vec![0.0; n * n];
        (0..n).for_each(|i| k[i * n + i] = s);
        k
    }

    #[test]
    fn logits_examples() {
        let probe = MemoryProbe::new();
        let keys = [1.0f32, 1.0, 1.0, 1.0];
        let rk = RowKeys {
            keys: &keys,
            active: 0..1,
        };
        let mut u = [0.0f32];
        fill_logits(&[1.0, 0.0, 1.0, 0.0], &rk, 4, &mut u).unwrap();
        assert_eq!(u[0], 1.0);

        let d = 3;
        let k = basis_keys(d);
        let sd = (d as f32).sqrt();
        let mut u = [0.0f32; 3];
        let q: Vec<f32> = k[d..2 * d].iter().map(|v| v * sd).collect();
        let rk = RowKeys {
            keys: &k,
            active: 0..3,
        };
        fill_logits(&q, &rk, d, &mut u).unwrap();
        assert!((u[1] - 3.0).abs() < 1e-5 && u[0] == 0.0 && u[2] == 0.0);

        let cache = KeyCache::from_parts(&k, &[0.0, 1.0, 2.0], d, &probe).unwrap();
        let mask = crate::corpus::time_mask(&cache, 1.5);
        let u = compute_logits(&[0.0; 3], &cache, &mask, &probe).unwrap();
        assert_eq!(&u[..], &[0.0, 0.0, f32::NEG_INFINITY]);
        assert!(matches!(
            compute_logits(&[0.0; 3], &cache, &crate::corpus::time_mask(&cache, 0.0), &probe),
            Err(Error::FullyMasked)
        ));
        drop(u);
        assert_eq!(probe.live(MemTag::Logits), 0);
    }

    #[test]
    fn exhausting_the_corpus_yields_a_permutation() {
        let probe = MemoryProbe::new();
        let n = 6;
        let keys = basis_keys(n);
        let qs = QuerySet::new((0..n * n).map(|i| (i % 7) as f32 * 0.3).collect(), n, n).unwrap();
        let mut r = rng::stream(0, 0);
        let out = sample_without_replacement(&qs, &row(&keys, n), 1.0, &mut r, &probe).unwrap();
        let mut s = out.sampled_indices.clone();
        s.sort();
        assert_eq!(s, (0..n).collect::<Vec<_>>());
        let mut g = out.greedy_indices.clone();
        g.sort();
        assert_eq!(g, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_items_is_an_error() {
        let probe = MemoryProbe::new();
        let keys = basis_keys(3);
        let rk = RowKeys {
            keys: &keys,
            active: 0..2,
        };
        let qs = QuerySet::new(vec![0.0; 9], 3, 3).unwrap();
        let err = sample_without_replacement(&qs, &rk, 1.0, &mut rng::stream(0, 0), &probe).unwrap_err();
        assert!(matches!(err, Error::InsufficientItems { kappa: 3, available: 2 }));
    }

    #[test]
    fn greedy_examples() {
        let probe = MemoryProbe::new();
        let keys = basis_keys(3);
        let qs = QuerySet::new(vec![1.0, 5.0, 2.0], 1, 3).unwrap();
        assert_eq!(greedy_select(&qs, &row(&keys, 3), &probe).unwrap(), vec![1]);
        let tie = QuerySet::new(vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0], 2, 3).unwrap();
        assert_eq!(greedy_select(&tie, &row(&keys, 3), &probe).unwrap(), vec![0, 1]);
    }

    #[test]
    fn greedy_agrees_with_near_zero_temperature_sampling() {
        let probe = MemoryProbe::new();
        let n = 5;
        let keys = basis_keys(n);
        let mut data = rng::stream(11, 0);
        for case in 0..100 {
            let kappa = 1 + case % 3;
            // Distinct logits with gaps of at least 0.01.
            let mut q = Vec::new();
            for _ in 0..kappa {
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, data.random_range(0..=i));
                }
                q.extend(perm.iter().map(|&p| p as f32 * 0.37 + 0.01 * case as f32));
            }
            let qs = QuerySet::new(q, kappa, n).unwrap();
            let mut r = rng::stream(case as u64, 1);
            let out = sample_without_replacement(&qs, &row(&keys, n), 1e-6, &mut r, &probe).unwrap();
            assert_eq!(out.sampled_indices, out.greedy_indices, "case {case}");
            assert_eq!(greedy_select(&qs, &row(&keys, n), &probe).unwrap(), out.greedy_indices);
        }
    }

    #[test]
    fn entropy_and_diagnostic_examples() {
        assert_eq!(selection_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((selection_entropy(&[0.125; 8]) - 8f64.ln()).abs() < 1e-7);
        assert!((selection_entropy(&[0.5, 0.5, 0.0]) - 2f64.ln()).abs() < 1e-7);
        assert_eq!(selection_loss_diagnostic(&[0.0, 1.0], 1), 0.0);
        assert!((selection_loss_diagnostic(&[0.125; 8], 3) - 2.0794).abs() < 1e-4);
        assert!((selection_loss_diagnostic(&[0.1, 0.9], 0) - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn outcome_log_probs_and_entropy_match_direct_softmax() {
        let probe = MemoryProbe::new();
        let keys = basis_keys(4);
        let qs = QuerySet::new(vec![0.3, -1.0, 2.0, 0.5, 1.0, 0.0, -0.5, 0.2], 2, 4).unwrap();
        let out = sample_without_replacement(&qs, &row(&keys, 4), 0.7, &mut rng::stream(5, 0), &probe).unwrap();
        let mut logits = qs.query(0).to_vec();
        let p0 = softmax_with_temperature(&logits, 0.7).unwrap();
        let s0 = out.sampled_indices[0];
        assert!((f64::from(out.sampled_log_probs[0]) - f64::from(p0[s0]).ln()).abs() < 1e-6);
        assert!((f64::from(out.per_query_entropy[0]) - selection_entropy(&p0)).abs() < 1e-6);
        logits = qs.query(1).to_vec();
        logits[s0] = f32::NEG_INFINITY;
        let p1 = softmax_with_temperature(&logits, 0.7).unwrap();
        let s1 = out.sampled_indices[1];
        assert!((f64::from(out.sampled_log_probs[1]) - f64::from(p1[s1]).ln()).abs() < 1e-6);
    }

    #[test]
    fn blend_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![2.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 2.0]));
        let half = g.constant(Tensor::vector(vec![0.0]));
        let out = residual_query_blend(&mut g, a, b, half).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 1.0]);
        let lo = g.constant(Tensor::vector(vec![-40.0]));
        let out = residual_query_blend(&mut g, a, b, lo).unwrap();
        assert!((g.value(out).data()[1] - 2.0).abs() < 1e-6);
        let hi = g.constant(Tensor::vector(vec![40.0]));
        let out = residual_query_blend(&mut g, a, b, hi).unwrap();
        assert!((g.value(out).data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn batch_logits_buffer_is_b_times_k() {
        let probe = MemoryProbe::new();
        let (rows, items, d, kappa) = (5, 7, 3, 2);
        let keys: Vec<f32> = (0..rows * items * d).map(|i| ((i * 37) % 11) as f32 * 0.1).collect();
        let src = PerRowKeys::new(Arc::new(keys), rows, items, d).unwrap();
        let q: Vec<f32> = (0..rows * kappa * d).map(|i| (i % 5) as f32 * 0.2).collect();
        let out = retrieve_batch(&q, kappa, &src, 1.0, &mut rng::stream(0, 0), &probe, None).unwrap();
        assert_eq!(out.len(), rows);
        assert_eq!(probe.peak(MemTag::Logits), rows * items * 4);
        assert_eq!(probe.live(MemTag::Logits), 0);
        for o in &out {
            assert_ne!(o.sampled_indices[0], o.sampled_indices[1]);
            assert_ne!(o.greedy_indices[0], o.greedy_indices[1]);
        }
    }

    #[test]
    fn selection_gradients_match_finite_differences() {
        let probe = MemoryProbe::new();
        let (rows, items, d, kappa) = (2, 4, 3, 2);
        let keys: Vec<f32> = (0..rows * items * d).map(|i| ((i * 29) % 13) as f32 * 0.15 - 0.8).collect();
        let src: Arc<dyn KeySource> = Arc::new(PerRowKeys::new(Arc::new(keys), rows, items, d).unwrap());
        let q0: Vec<f32> = (0..rows * kappa * d).map(|i| ((i * 7) % 5) as f32 * 0.3 - 0.6).collect();
        let temperature = 0.8;
        let outcomes = retrieve_batch(&q0, kappa, src.as_ref(), temperature, &mut rng::stream(1, 0), &probe, None).unwrap();
        let fixed: Vec<Vec<usize>> = outcomes.iter().map(|o| o.sampled_indices.clone()).collect();

        for quantity in [SelectionQuantity::LogProb, SelectionQuantity::Entropy] {
            let src = Arc::clone(&src);
            let fixed = fixed.clone();
            let worst = finite_difference_check(
                &[Tensor::new(vec![rows, kappa * d], q0.clone()).unwrap()],
                1e-3,
                move |g, v| {
                    // Recompute the forward statistics at the perturbed queries
                    // with the sampled indices held fixed.
                    let qv = g.value(v[0]).data().to_vec();
                    let outs: Vec<RetrievalOutcome> = (0..rows)
                        .map(|r| {
                            let rk = src.row(r);
                            let mut o = RetrievalOutcome::with_capacity(kappa);
                            for m in 0..kappa {
                                let mut u = vec![0.0f32; items];
                                fill_logits(&qv[(r * kappa + m) * d..(r * kappa + m + 1) * d], &rk, d, &mut u).unwrap();
                                for &i in &fixed[r][..m] {
                                    u[i] = f32::NEG_INFINITY;
                                }
                                let p = softmax_with_temperature(&u, temperature).unwrap();
                                let s = fixed[r][m];
                                o.sampled_indices.push(s);
                                o.sampled_log_probs.push(f64::from(p[s]).ln() as f32);
                                o.per_query_entropy.push(selection_entropy(&p) as f32);
                            }
                            o
                        })
                        .collect();
                    let node = selection_node(g, v[0], Arc::clone(&src), &outs, kappa, temperature, quantity).unwrap();
                    g.dot_const(node, vec![1.0, -0.7]).unwrap()
                },
            );
            assert!(worst <= 1e-3, "{quantity:?}: worst relative error {worst}");
        }
    }
}
