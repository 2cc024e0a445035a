//! Test-only oracles shared by unit tests.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Compares reverse-mode adjoints of every input against central finite
/// differences and returns the worst norm-wise relative error
/// `|g_ad - g_fd| / |g_fd|` over the inputs.
pub fn finite_difference_check<F>(inputs: &[Tensor], step: f32, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.var(t.clone())).collect();
        let root = build(&mut g, &vars);
        f64::from(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root).expect("scalar root");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(vars[i]) {
            Some(t) => t.data().iter().map(|&v| f64::from(v)).collect(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let mut values = inputs.to_vec();
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let plus = eval(&values);
            values[i].data_mut()[j] = orig - step;
            let minus = eval(&values);
            // The perturbation actually applied after rounding to f32.
            let h = f64::from(orig + step) - f64::from(orig - step);
            numeric.push((plus - minus) / h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}
