//! Synthetic nonstationary classification settings.
//!
//! * **Needle in a haystack**: the label is written into the first bit of a
//!   single history item, and the query input is a noisy linear image of
//!   that item's key. Nothing about the label can be read from the input
//!   alone.
//! * **Rotating decision boundary**: two Gaussian classes whose separation
//!   vector rotates by π over `t ∈ [0, 1]`; inputs carry a sinusoidal time
//!   embedding and history items are drawn from earlier times.
//!
//! Generators are pure functions of their config seed and the caller's RNG.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Timestamps drawn for a query at exactly `t0 = 0` fall in `[0, ZERO_TIME_EPS)`.
pub const ZERO_TIME_EPS: f64 = 1e-6;

/// `(sin 2π f_j t, cos 2π f_j t)` pairs for `f_j = 2^j`, interleaved.
pub fn fourier_time_embedding(t: f64, n_frequencies: usize) -> Result<Vec<f32>> {
    if n_frequencies < 1 {
        return Err(Error::invalid("fourier_time_embedding needs at least one frequency"));
    }
    let mut out = Vec::with_capacity(2 * n_frequencies);
    push_time_embedding(&mut out, t, n_frequencies);
    Ok(out)
}

fn push_time_embedding(out: &mut Vec<f32>, t: f64, n_frequencies: usize) {
    // Each frequency doubles the last, so one sin_cos plus angle doubling
    // covers them all.
    let (mut s, mut c) = (2.0 * std::f64::consts::PI * t).sin_cos();
    for _ in 0..n_frequencies {
        out.push(s as f32);
        out.push(c as f32);
        (s, c) = (2.0 * s * c, c * c - s * s);
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Needle in a haystack
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleConfig {
    pub history_size: usize,
    pub bitstring_length: usize,
    pub key_dim: usize,
    pub observation_noise: f64,
    pub seed: u64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self {
            history_size: 8,
            bitstring_length: 8,
            key_dim: 64,
            observation_noise: 0.1f64.sqrt(),
            seed: 0,
        }
    }
}

impl NeedleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_size < 2 {
            return Err(Error::config("needle.history_size", "must be at least 2"));
        }
        if self.bitstring_length < 1 {
            return Err(Error::config("needle.bitstring_length", "must be at least 1"));
        }
        if self.key_dim < 1 {
            return Err(Error::config("needle.key_dim", "must be at least 1"));
        }
        if !(self.observation_noise >= 0.0) || !self.observation_noise.is_finite() {
            return Err(Error::config("needle.observation_noise", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NeedleGenerator {
    cfg: NeedleConfig,
    /// Row-major `[d, d]` transform applied to the needle key.
    transform: Vec<f32>,
}

/// One batch of needle-setting examples in flat row-major buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct NeedleBatch {
    pub batch_size: usize,
    pub history_size: usize,
    pub bitstring_length: usize,
    pub key_dim: usize,
    /// `[B, d]` query inputs.
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    /// `[B, K, d]` history keys.
    pub keys: Vec<f32>,
    /// `[B, K, D']` history bitstrings as 0.0 / 1.0.
    pub items: Vec<f32>,
    /// Zero-based index of the label-carrying item; never shown to the model.
    pub needle: Vec<usize>,
}

/// Borrowed view of one row's history.
#[derive(Clone, Copy, Debug)]
pub struct HistorySequence<'a> {
    pub items: &'a [f32],
    pub keys: &'a [f32],
    pub labels: Option<&'a [usize]>,
    pub times: Option<&'a [f64]>,
    pub needle_index: Option<usize>,
}

impl NeedleBatch {
    pub fn history(&self, row: usize) -> HistorySequence<'_> {
        let (k, d, w) = (self.history_size, self.key_dim, self.bitstring_length);
        HistorySequence {
            items: &self.items[row * k * w..(row + 1) * k * w],
            keys: &self.keys[row * k * d..(row + 1) * k * d],
            labels: None,
            times: None,
            needle_index: Some(self.needle[row]),
        }
    }
}

impl NeedleGenerator {
    /// Draws the fixed transform `T ~ N(0, 1/d)^{d×d}` from the config seed.
    pub fn new(cfg: NeedleConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.key_dim;
        let mut r = rng::stream(cfg.seed, rng::streams::GENERATOR);
        let sd = 1.0 / (d as f64).sqrt();
        let transform = (0..d * d).map(|_| (normal(&mut r) * sd) as f32).collect();
        Ok(Self { cfg, transform })
    }

    /// Uses a caller-supplied `[d, d]` transform instead of a random one.
    pub fn with_transform(cfg: NeedleConfig, transform: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        if transform.len() != cfg.key_dim * cfg.key_dim {
            return Err(Error::ShapeMismatch {
                op: "needle transform",
                left: vec![cfg.key_dim, cfg.key_dim],
                right: vec![transform.len()],
            });
        }
        Ok(Self { cfg, transform })
    }

    pub fn config(&self) -> &NeedleConfig {
        &self.cfg
    }

    pub fn transform(&self) -> &[f32] {
        &self.transform
    }

    pub fn batch(&self, batch_size: usize, rng: &mut Rng) -> NeedleBatch {
        let NeedleConfig {
            history_size: k,
            bitstring_length: w,
            key_dim: d,
            observation_noise: sigma,
            ..
        } = self.cfg;
        let mut b = NeedleBatch {
            batch_size,
            history_size: k,
            bitstring_length: w,
            key_dim: d,
            inputs: Vec::with_capacity(batch_size * d),
            labels: Vec::with_capacity(batch_size),
            keys: Vec::with_capacity(batch_size * k * d),
            items: Vec::with_capacity(batch_size * k * w),
            needle: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let y = rng.random_range(0..2usize);
            let needle = rng.random_range(0..k);
            for m in 0..k {
                for n in 0..w {
                    let bit = if m == needle && n == 0 {
                        y
                    } else {
                        rng.random_range(0..2usize)
                    };
                    b.items.push(bit as f32);
                }
            }
            let key_start = b.keys.len();
            for _ in 0..k * d {
                b.keys.push(normal(rng) as f32);
            }
            let key = &b.keys[key_start + needle * d..key_start + (needle + 1) * d];
            for i in 0..d {
                let row = &self.transform[i * d..(i + 1) * d];
                let dot: f64 = row.iter().zip(key).map(|(&t, &k)| f64::from(t) * f64::from(k)).sum();
                b.inputs.push((dot + sigma * normal(rng)) as f32);
            }
            b.labels.push(y);
            b.needle.push(needle);
        }
        b
    }
}

// ---------------------------------------------------------------------------
// Rotating decision boundary
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotatingConfig {
    pub dim: usize,
    pub class_separation: f64,
    pub observation_noise: f64,
    pub fourier_frequencies: usize,
    pub history_size: usize,
    pub train_time_range: [f64; 2],
    pub test_time_range: [f64; 2],
    pub seed: u64,
}

impl Default for RotatingConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            class_separation: 4.0,
            observation_noise: 1.0,
            fourier_frequencies: 8,
            history_size: 128,
            train_time_range: [0.0, 0.5],
            test_time_range: [0.0, 1.0],
            seed: 0,
        }
    }
}

impl RotatingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("rotating.dim", "must be at least 2"));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::config("rotating.class_separation", "must be positive"));
        }
        if !(self.observation_noise > 0.0) {
            return Err(Error::config("rotating.observation_noise", "must be positive"));
        }
        if self.fourier_frequencies < 1 || self.fourier_frequencies > 30 {
            return Err(Error::config("rotating.fourier_frequencies", "must lie in 1..=30"));
        }
        if self.history_size < 1 {
            return Err(Error::config("rotating.history_size", "must be positive"));
        }
        for (field, [a, b]) in [
            ("rotating.train_time_range", self.train_time_range),
            ("rotating.test_time_range", self.test_time_range),
        ] {
            check_time_range(a, b).map_err(|e| Error::config(field, e.to_string()))?;
        }
        Ok(())
    }

    /// Width of an input: raw covariates plus the time embedding.
    pub fn feature_dim(&self) -> usize {
        self.dim + 2 * self.fourier_frequencies
    }
}

fn check_time_range(a: f64, b: f64) -> Result<()> {
    if !(a < b) {
        return Err(Error::invalid(format!("time range [{a}, {b}] must satisfy a < b")));
    }
    if a < 0.0 || b > 1.0 {
        return Err(Error::invalid(format!("time range [{a}, {b}] must lie within [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RotatingGenerator {
    cfg: RotatingConfig,
    theta0: Vec<f64>,
    theta1: Vec<f64>,
}

/// One batch of rotating-setting queries with their histories.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatingBatch {
    pub batch_size: usize,
    pub history_size: usize,
    pub feature_dim: usize,
    /// `[B, F]` query features (covariates then time embedding).
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub times: Vec<f64>,
    /// `[B, K, F]` history features; these double as the history keys.
    pub history_inputs: Vec<f32>,
    pub history_labels: Vec<usize>,
    pub history_times: Vec<f64>,
}

impl RotatingBatch {
    pub fn history(&self, row: usize) -> HistorySequence<'_> {
        let (k, f) = (self.history_size, self.feature_dim);
        let items = &self.history_inputs[row * k * f..(row + 1) * k * f];
        HistorySequence {
            items,
            keys: items,
            labels: Some(&self.history_labels[row * k..(row + 1) * k]),
            times: Some(&self.history_times[row * k..(row + 1) * k]),
            needle_index: None,
        }
    }
}

impl RotatingGenerator {
    /// Draws the orthonormal pair `θ0, θ1` from the config seed.
    pub fn new(cfg: RotatingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, rng::streams::GENERATOR);
        let dim = cfg.dim;
        let raw0: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
        let theta0 = normalized(&raw0);
        let raw1: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
        let proj: f64 = raw1.iter().zip(&theta0).map(|(a, b)| a * b).sum();
        let resid: Vec<f64> = raw1.iter().zip(&theta0).map(|(a, b)| a - proj * b).collect();
        let theta1 = normalized(&resid);
        Ok(Self { cfg, theta0, theta1 })
    }

    pub fn config(&self) -> &RotatingConfig {
        &self.cfg
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn theta1(&self) -> &[f64] {
        &self.theta1
    }

    /// Rotation phase `τ(t) = 0.5 cos(π t) + 0.5`.
    pub fn phase(t: f64) -> f64 {
        0.5 * (std::f64::consts::PI * t).cos() + 0.5
    }

    /// Class-separation vector `Δ(t) = δ (θ0 cos πτ + θ1 sin πτ)`.
    pub fn separation(&self, t: f64) -> Vec<f64> {
        let angle = std::f64::consts::PI * Self::phase(t);
        let (s, c) = angle.sin_cos();
        let delta = self.cfg.class_separation;
        self.theta0
            .iter()
            .zip(&self.theta1)
            .map(|(a, b)| delta * (a * c + b * s))
            .collect()
    }

    /// Appends one example's features at time `t` and returns its label.
    fn push_example(&self, out: &mut Vec<f32>, t: f64, rng: &mut Rng) -> usize {
        let y = rng.random_range(0..2usize);
        let sign = if y == 1 { 0.5 } else { -0.5 };
        let angle = std::f64::consts::PI * Self::phase(t);
        let (s, c) = angle.sin_cos();
        let delta = self.cfg.class_separation;
        for (a, b) in self.theta0.iter().zip(&self.theta1) {
            let sep = delta * (a * c + b * s);
            out.push((self.cfg.observation_noise * normal(rng) + sign * sep) as f32);
        }
        push_time_embedding(out, t, self.cfg.fourier_frequencies);
        y
    }

    /// Draws a single labeled example at time `t`.
    pub fn example(&self, t: f64, rng: &mut Rng) -> (Vec<f32>, usize) {
        let mut x = Vec::with_capacity(self.cfg.feature_dim());
        let y = self.push_example(&mut x, t, rng);
        (x, y)
    }

    /// Label predicted by the Bayes-optimal rule at time `t`: the sign of
    /// `Δ(t) · x'` on the raw covariates.
    pub fn bayes_label(&self, t: f64, features: &[f32]) -> usize {
        let sep = self.separation(t);
        let score: f64 = sep.iter().zip(features).map(|(s, &x)| s * f64::from(x)).sum();
        usize::from(score > 0.0)
    }

    /// `n` labeled examples at times drawn from `time_range`, without
    /// histories: `([n, F] features, labels, times)`.
    pub fn examples(&self, n: usize, time_range: [f64; 2], rng: &mut Rng) -> Result<(Vec<f32>, Vec<usize>, Vec<f64>)> {
        let [a, b] = time_range;
        check_time_range(a, b)?;
        let mut x = Vec::with_capacity(n * self.cfg.feature_dim());
        let mut labels = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        for _ in 0..n {
            let t = rng.random_range(a..b);
            labels.push(self.push_example(&mut x, t, rng));
            times.push(t);
        }
        Ok((x, labels, times))
    }

    pub fn batch(&self, batch_size: usize, time_range: [f64; 2], rng: &mut Rng) -> Result<RotatingBatch> {
        let [a, b] = time_range;
        check_time_range(a, b)?;
        let f = self.cfg.feature_dim();
        let k = self.cfg.history_size;
        let mut out = RotatingBatch {
            batch_size,
            history_size: k,
            feature_dim: f,
            inputs: Vec::with_capacity(batch_size * f),
            labels: Vec::with_capacity(batch_size),
            times: Vec::with_capacity(batch_size),
            history_inputs: Vec::with_capacity(batch_size * k * f),
            history_labels: Vec::with_capacity(batch_size * k),
            history_times: Vec::with_capacity(batch_size * k),
        };
        for _ in 0..batch_size {
            let t0 = rng.random_range(a..b);
            let y = self.push_example(&mut out.inputs, t0, rng);
            out.labels.push(y);
            out.times.push(t0);
            let upper = if t0 > 0.0 { t0 } else { ZERO_TIME_EPS };
            for _ in 0..k {
                // random_range is half-open, so history times stay below t0.
                let t = rng.random_range(0.0..upper);
                let yh = self.push_example(&mut out.history_inputs, t, rng);
                out.history_labels.push(yh);
                out.history_times.push(t);
            }
        }
        Ok(out)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn time_embedding_examples() {
        let e = fourier_time_embedding(0.0, 8).unwrap();
        assert_eq!(e.len(), 16);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let e = fourier_time_embedding(0.5, 1).unwrap();
        assert!(e[0].abs() < 1e-7 && (e[1] + 1.0).abs() < 1e-7);
        assert!(fourier_time_embedding(0.3, 0).is_err());
    }

    #[test]
    fn time_embedding_matches_direct_evaluation() {
        for i in 0..=200 {
            let t = f64::from(i) / 200.0;
            let e = fourier_time_embedding(t, 8).unwrap();
            for j in 0..8 {
                let phase = 2.0 * std::f64::consts::PI * f64::from(1u32 << j) * t;
                assert!((f64::from(e[2 * j]) - phase.sin()).abs() < 1e-6, "t={t} j={j}");
                assert!((f64::from(e[2 * j + 1]) - phase.cos()).abs() < 1e-6, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn needle_first_bit_carries_label() {
        let generator = NeedleGenerator::new(NeedleConfig::default()).unwrap();
        let mut r = rng::stream(3, 0);
        let b = generator.batch(10_000, &mut r);
        for row in 0..b.batch_size {
            let h = b.history(row);
            let m = h.needle_index.unwrap();
            assert_eq!(h.items[m * b.bitstring_length] as usize, b.labels[row]);
        }
    }

    #[test]
    fn noiseless_identity_needle_is_recoverable_by_cosine_similarity() {
        let cfg = NeedleConfig {
            observation_noise: 0.0,
            history_size: 16,
            key_dim: 8,
            ..NeedleConfig::default()
        };
        let d = cfg.key_dim;
        let mut eye = vec![0.0f32; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let generator = NeedleGenerator::with_transform(cfg, eye).unwrap();
        let b = generator.batch(500, &mut rng::stream(1, 0));
        for row in 0..b.batch_size {
            let x = &b.inputs[row * d..(row + 1) * d];
            let h = b.history(row);
            let cos = |k: &[f32]| {
                let (mut xy, mut kk) = (0.0f64, 0.0f64);
                for (a, c) in x.iter().zip(k) {
                    xy += f64::from(*a) * f64::from(*c);
                    kk += f64::from(*c) * f64::from(*c);
                }
                xy / kk.sqrt()
            };
            let best = (0..b.history_size)
                .max_by(|&i, &j| cos(&h.keys[i * d..(i + 1) * d]).total_cmp(&cos(&h.keys[j * d..(j + 1) * d])))
                .unwrap();
            assert_eq!(best, b.needle[row]);
        }
    }

    #[test]
    fn needle_generation_is_reproducible() {
        let g = NeedleGenerator::new(NeedleConfig::default()).unwrap();
        let a = g.batch(20, &mut rng::stream(9, 1));
        let b = NeedleGenerator::new(NeedleConfig::default())
            .unwrap()
            .batch(20, &mut rng::stream(9, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn needle_config_validation() {
        let bad = NeedleConfig {
            history_size: 1,
            ..NeedleConfig::default()
        };
        assert!(NeedleGenerator::new(bad).is_err());
    }

    #[test]
    fn rotating_basis_is_orthonormal() {
        for seed in 0..20 {
            let g = RotatingGenerator::new(RotatingConfig {
                seed,
                ..RotatingConfig::default()
            })
            .unwrap();
            assert!((dot(g.theta0(), g.theta0()) - 1.0).abs() < 1e-6);
            assert!((dot(g.theta1(), g.theta1()) - 1.0).abs() < 1e-6);
            assert!(dot(g.theta0(), g.theta1()).abs() < 1e-6);
        }
    }

    #[test]
    fn separation_rotates_half_a_turn() {
        let g = RotatingGenerator::new(RotatingConfig::default()).unwrap();
        let delta = g.config().class_separation;
        let start = g.separation(0.0);
        let end = g.separation(1.0);
        let mid = g.separation(0.5);
        for i in 0..g.config().dim {
            assert!((start[i] + delta * g.theta0()[i]).abs() < 1e-9);
            assert!((end[i] - delta * g.theta0()[i]).abs() < 1e-9);
            assert!((mid[i] - delta * g.theta1()[i]).abs() < 1e-9);
        }
        assert!((RotatingGenerator::phase(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotating_history_precedes_query() {
        let g = RotatingGenerator::new(RotatingConfig {
            history_size: 32,
            ..RotatingConfig::default()
        })
        .unwrap();
        let b = g.batch(200, [0.0, 1.0], &mut rng::stream(4, 0)).unwrap();
        for row in 0..b.batch_size {
            let h = b.history(row);
            assert!(h.times.unwrap().iter().all(|&t| t < b.times[row]));
        }
        assert_eq!(b.feature_dim, 64 + 16);
    }

    #[test]
    fn rotating_rejects_bad_time_range() {
        let g = RotatingGenerator::new(RotatingConfig::default()).unwrap();
        let mut r = rng::stream(0, 0);
        assert!(g.batch(1, [0.5, 0.5], &mut r).is_err());
        assert!(g.batch(1, [0.6, 0.2], &mut r).is_err());
        assert!(g.batch(1, [-0.1, 0.2], &mut r).is_err());
    }
}
