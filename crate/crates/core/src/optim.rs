//! AdamW with global-norm clipping and a warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: f64::INFINITY,
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

/// Diagnostics from one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_factor: f64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &crate::params::Param| Tensor::zeros(p.value.shape());
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|(_, p)| zeros(p)).collect(),
            second_moment: params.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// One AdamW update.
    ///
    /// The global gradient norm over every supplied gradient is clipped to
    /// `max_grad_norm` first. Each parameter then moves with learning rate
    /// `lr * lr_scale * group_scale(group)`; decay is decoupled from the
    /// moments. Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr_scale: f64,
        group_scale: impl Fn(ParamGroup) -> f64,
    ) -> Result<StepReport> {
        if !(lr_scale > 0.0) {
            return Err(Error::invalid(format!("lr_scale must be positive, got {lr_scale}")));
        }
        let mut sq = 0.0f64;
        for (id, g) in grads {
            let p = params.get(*id);
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    group: p.group.as_str().to_string(),
                    param: p.name.clone(),
                });
            }
            sq += g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let c = self.config;
        let clip_factor = if grad_norm > c.max_grad_norm {
            c.max_grad_norm / grad_norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (id, g) in grads {
            let group = params.get(*id).group;
            let lr = c.lr * lr_scale * group_scale(group);
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let p = params.value_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = f64::from(g.data()[i]) * clip_factor;
                let mi = c.beta1 * f64::from(m[i]) + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * f64::from(v[i]) + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mut pi = f64::from(p[i]);
                pi *= 1.0 - lr * c.weight_decay;
                pi -= lr * (mi / bias1) / ((vi / bias2).sqrt() + c.eps);
                p[i] = pi as f32;
            }
        }
        Ok(StepReport { grad_norm, clip_factor })
    }
}

/// Learning-rate multiplier: linear ramp from 0 to 1 over the first
/// `warmup_fraction` of `total_steps`, then cosine decay to `floor_fraction`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_fraction: f64, floor_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::invalid(format!(
            "warmup_fraction must lie in [0, 1), got {warmup_fraction}"
        )));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} exceeds total_steps {total_steps}")));
    }
    let total = total_steps as f64;
    let warmup = warmup_fraction * total;
    let s = step as f64;
    if s < warmup {
        return Ok(s / warmup);
    }
    let span = total - warmup;
    let progress = if span > 0.0 { (s - warmup) / span } else { 1.0 };
    Ok(floor_fraction + (1.0 - floor_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Other, Tensor::vector(vec![v]));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = scalar_store(0.7);
        let mut st = OptimizerState::new(AdamWConfig::default(), &store);
        st.step(&mut store, &[(id, Tensor::vector(vec![0.0]))], 1.0, |_| 1.0).unwrap();
        assert_eq!(store.value(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        st.step(&mut store, &[(id, Tensor::vector(vec![1.0]))], 1.0, |_| 1.0).unwrap();
        // Bias-corrected moments are both 1, so the step is lr / (1 + eps).
        let moved = 1.0 - f64::from(store.value(id).data()[0]);
        assert!((moved - 0.1).abs() < 1e-6, "{moved}");
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Other, Tensor::vector(vec![0.0, 0.0]));
        let b = store.add("b", ParamGroup::Retrieval, Tensor::vector(vec![0.0]));
        let cfg = AdamWConfig {
            max_grad_norm: 1.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        let grads = [(a, Tensor::vector(vec![6.0, 0.0])), (b, Tensor::vector(vec![8.0]))];
        let rep = st.step(&mut store, &grads, 1.0, |_| 1.0).unwrap();
        assert!((rep.grad_norm - 10.0).abs() < 1e-12);
        let effective = rep.grad_norm * rep.clip_factor;
        assert!((effective - 1.0).abs() < 1e-6);
        // First moment after one step is (1 - beta1) * clipped gradient.
        let m_norm = (st.first_moment[0].norm().powi(2) + st.first_moment[1].norm().powi(2)).sqrt();
        assert!((m_norm / 0.1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn group_multiplier_scales_retrieval_step() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Other, Tensor::vector(vec![0.0]));
        let b = store.add("b", ParamGroup::Retrieval, Tensor::vector(vec![0.0]));
        let cfg = AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        let grads = [(a, Tensor::vector(vec![1.0])), (b, Tensor::vector(vec![1.0]))];
        st.step(&mut store, &grads, 0.5, |g| if g == ParamGroup::Retrieval { 10.0 } else { 1.0 })
            .unwrap();
        let da = f64::from(store.value(a).data()[0]);
        let db = f64::from(store.value(b).data()[0]);
        assert!((db / da - 10.0).abs() < 1e-4, "{da} {db}");
        assert!((da + 0.5e-3).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let (mut store, id) = scalar_store(0.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &store);
        let err = st
            .step(&mut store, &[(id, Tensor::vector(vec![f32::NAN]))], 1.0, |_| 1.0)
            .unwrap_err();
        assert!(err.to_string().contains("other"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient_signal() {
        let (mut store, id) = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        st.step(&mut store, &[(id, Tensor::vector(vec![0.0]))], 1.0, |_| 1.0).unwrap();
        assert!((store.value(id).data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("w", ParamGroup::Other, Tensor::vector(vec![0.3, -1.7, 2.2]));
            let cfg = AdamWConfig {
                lr: 0.01,
                weight_decay: 1e-4,
                max_grad_norm: 1.0,
                ..AdamWConfig::default()
            };
            let mut st = OptimizerState::new(cfg, &store);
            for k in 0..5 {
                let g = Tensor::vector(vec![0.1 * k as f32, -2.0, 0.7]);
                st.step(&mut store, &[(id, g)], 1.0, |_| 1.0).unwrap();
            }
            store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_examples() {
        let total = 1000;
        assert_eq!(lr_schedule(100, total, 0.1, 0.1).unwrap(), 1.0);
        assert!((lr_schedule(total, total, 0.1, 0.1).unwrap() - 0.1).abs() < 1e-12);
        assert!((lr_schedule(550, total, 0.1, 0.1).unwrap() - 0.55).abs() < 1e-12);
        assert!((lr_schedule(50, total, 0.1, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(lr_schedule(0, total, 0.0, 0.1).unwrap(), 1.0);
        assert!(lr_schedule(0, total, 1.0, 0.1).is_err());
        assert!(lr_schedule(0, total, -0.1, 0.1).is_err());
    }
}
