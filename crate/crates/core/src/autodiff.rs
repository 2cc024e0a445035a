//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the tape is a
//! topological order by construction and the graph cannot contain cycles.
//! [`Graph::backward`] walks the tape in reverse from a scalar root and
//! accumulates adjoints for every node that requires a gradient.
//!
//! Matrix products run through `matrixmultiply`'s single-precision kernels;
//! reductions (sums, means, log-sum-exp) accumulate in `f64`.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside this module.
///
/// `backward` receives the forward values of the op's inputs, its own
/// output and the upstream adjoint, and returns one optional adjoint per
/// input (in input order).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    Sigmoid(Var),
    Blend { learned: Var, similarity: Var, alpha: Var },
    LogSoftmax { x: Var, temperature: f32 },
    NllRows { logp: Var, labels: Vec<usize> },
    StopGrad,
    ReplaceBlocks { src: Var, fill: Var, replaced: Vec<bool> },
    DotConst { x: Var, weights: Vec<f32> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatCols(_) => "concat",
            Op::Sigmoid(_) => "sigmoid",
            Op::Blend { .. } => "blend",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::NllRows { .. } => "nll",
            Op::StopGrad => "stop_grad",
            Op::ReplaceBlocks { .. } => "replace_blocks",
            Op::DotConst { .. } => "dot_const",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation. Cheap to create; drop it to release activations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter that was placed on the graph and reached
    /// by the backward pass. Parameters placed more than once are summed.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, node) in &self.params {
            let Some(g) = &self.adjoints[node] else { continue };
            if let Some((_, acc)) = out.iter_mut().find(|(p, _)| *p == id) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            } else {
                out.push((id, g.clone()));
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `c = alpha * a @ b + beta * c` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the bounds above cover every element addressed by the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f32])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn add_into(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Places a parameter on the tape; its adjoint is reported by
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.var(store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `input[B, n_in] @ weight[n_out, n_in]^T + bias[n_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, n_in) = xv.dims2()?;
        let (n_out, w_in) = match wv.shape() {
            [o, i] => (*o, *i),
            _ => return Err(shape_err("linear", xv, wv)),
        };
        if w_in != n_in {
            return Err(shape_err("linear", xv, wv));
        }
        if bv.len() != n_out {
            return Err(shape_err("linear", wv, bv));
        }
        let mut out = vec![0.0f32; batch * n_out];
        for row in out.chunks_exact_mut(n_out) {
            row.copy_from_slice(bv.data());
        }
        sgemm(
            batch,
            n_in,
            n_out,
            xv.data(),
            (n_in, 1),
            wv.data(),
            (1, n_in),
            &mut out,
            1.0,
        );
        let shape = if xv.shape().len() == 1 {
            vec![n_out]
        } else {
            vec![batch, n_out]
        };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f32> = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let s = (av.sum() / n) as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Concatenates `[B, n_i]` tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (batch, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (b, n) = self.value(p).dims2()?;
            if b != batch {
                return Err(shape_err("concat", self.value(*first), self.value(p)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; batch * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..batch {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![batch, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// `alpha * learned + (1 - alpha) * similarity` with a one-element `alpha`.
    pub fn blend(&mut self, learned: Var, similarity: Var, alpha: Var) -> Result<Var> {
        let al = self.value(alpha);
        if al.len() != 1 {
            return Err(Error::invalid(format!(
                "blend coefficient must have one element, got shape {:?}",
                al.shape()
            )));
        }
        let a = al.item();
        let t = self.zip_with(learned, similarity, "blend", |x, y| a * x + (1.0 - a) * y)?;
        let rg = self.rg(&[learned, similarity, alpha]);
        Ok(self.push(t, Op::Blend { learned, similarity, alpha }, rg))
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let src = &xv.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(src, temperature)?;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *o = (f64::from(v) / f64::from(temperature) - lse) as f32;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LogSoftmax { x, temperature },
            rg,
        ))
    }

    /// Per-row negative log-likelihood `-logp[b, labels[b]]`, shape `[B]`.
    pub fn nll_rows(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logp);
        let (rows, classes) = lv.dims2()?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "nll",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            out.push(-lv.data()[r * classes + y]);
        }
        let rg = self.rg(&[logp]);
        Ok(self.push(
            Tensor::vector(out),
            Op::NllRows {
                logp,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Identity in the forward pass; blocks adjoint flow in the backward pass.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Views `src[B, n * w]` as `B * n` blocks of width `w = fill.len()` and
    /// substitutes `fill` for every block whose flag in `replaced` is set.
    pub fn replace_blocks(&mut self, src: Var, fill: Var, replaced: &[bool]) -> Result<Var> {
        let (sv, fv) = (self.value(src), self.value(fill));
        let width = fv.len();
        if width == 0 || sv.len() != replaced.len() * width {
            return Err(shape_err("replace_blocks", sv, fv));
        }
        let mut out = sv.data().to_vec();
        for (block, &r) in out.chunks_exact_mut(width).zip(replaced) {
            if r {
                block.copy_from_slice(fv.data());
            }
        }
        let t = Tensor::from_parts(sv.shape().to_vec(), out);
        let rg = self.rg(&[src, fill]);
        Ok(self.push(
            t,
            Op::ReplaceBlocks {
                src,
                fill,
                replaced: replaced.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `sum_i x_i * weights_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                left: xv.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s as f32), Op::DotConst { x, weights }, rg))
    }

    /// Records an externally computed value whose adjoint rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { adjoints: adj, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, n_in) = xv.dims2().expect("checked in forward");
                let n_out = wv.shape()[0];
                if self.wants(*x) {
                    accumulate(&mut adj[x.0], xv.shape(), |dx| {
                        sgemm(batch, n_out, n_in, g.data(), (n_out, 1), wv.data(), (n_in, 1), dx, 1.0)
                    });
                }
                if self.wants(*w) {
                    accumulate(&mut adj[w.0], wv.shape(), |dw| {
                        sgemm(n_out, batch, n_in, g.data(), (1, n_out), xv.data(), (n_in, 1), dw, 1.0)
                    });
                }
                if self.wants(*b) {
                    let mut db = vec![0.0f64; n_out];
                    for row in g.data().chunks_exact(n_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += f64::from(v);
                        }
                    }
                    accumulate(&mut adj[b.0], self.value(*b).shape(), |t| {
                        for (a, v) in t.iter_mut().zip(db) {
                            *a += v as f32;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    accumulate(&mut adj[x.0], xv.shape(), |dx| {
                        for ((d, &v), &gv) in dx.iter_mut().zip(xv.data()).zip(g.data()) {
                            if v > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut adj[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut adj[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], g.shape(), |d| {
                        for (x, &gv) in d.iter_mut().zip(g.data()) {
                            *x -= gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(a, b), (b, a)] {
                    if self.wants(*this) {
                        let ov = self.value(*other);
                        accumulate(&mut adj[this.0], g.shape(), |d| {
                            for ((x, &gv), &o) in d.iter_mut().zip(g.data()).zip(ov.data()) {
                                *x += gv * o;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], g.shape(), |d| {
                        for (x, &gv) in d.iter_mut().zip(g.data()) {
                            *x += gv * factor;
                        }
                    });
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / av.len().max(1) as f32
                    } else {
                        1.0
                    };
                    let gv = g.item() * scale;
                    accumulate(&mut adj[a.0], av.shape(), |d| d.iter_mut().for_each(|x| *x += gv));
                }
            }
            Op::ConcatCols(parts) => {
                let (batch, total) = (g.shape()[0], g.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.dims2().expect("checked in forward").1;
                    if self.wants(*p) {
                        accumulate(&mut adj[p.0], pv.shape(), |d| {
                            for r in 0..batch {
                                let src = &g.data()[r * total + offset..r * total + offset + w];
                                for (x, &gv) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *x += gv;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    accumulate(&mut adj[a.0], y.shape(), |d| {
                        for ((x, &gv), &yv) in d.iter_mut().zip(g.data()).zip(y.data()) {
                            *x += gv * yv * (1.0 - yv);
                        }
                    });
                }
            }
            Op::Blend {
                learned,
                similarity,
                alpha,
            } => {
                let a = self.value(*alpha).item();
                if self.wants(*learned) {
                    accumulate(&mut adj[learned.0], g.shape(), |d| {
                        for (x, &gv) in d.iter_mut().zip(g.data()) {
                            *x += a * gv;
                        }
                    });
                }
                if self.wants(*similarity) {
                    accumulate(&mut adj[similarity.0], g.shape(), |d| {
                        for (x, &gv) in d.iter_mut().zip(g.data()) {
                            *x += (1.0 - a) * gv;
                        }
                    });
                }
                if self.wants(*alpha) {
                    let (lv, sv) = (self.value(*learned), self.value(*similarity));
                    let da: f64 = g
                        .data()
                        .iter()
                        .zip(lv.data().iter().zip(sv.data()))
                        .map(|(&gv, (&l, &s))| f64::from(gv) * f64::from(l - s))
                        .sum();
                    accumulate(&mut adj[alpha.0], self.value(*alpha).shape(), |d| d[0] += da as f32);
                }
            }
            Op::LogSoftmax { x, temperature } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (rows, cols) = y.dims2().expect("checked in forward");
                    let inv_t = 1.0 / f64::from(*temperature);
                    accumulate(&mut adj[x.0], y.shape(), |d| {
                        for r in 0..rows {
                            let gr = &g.data()[r * cols..(r + 1) * cols];
                            let yr = &y.data()[r * cols..(r + 1) * cols];
                            let gsum: f64 = gr.iter().map(|&v| f64::from(v)).sum();
                            for c in 0..cols {
                                let p = f64::from(yr[c]).exp();
                                d[r * cols + c] += ((f64::from(gr[c]) - p * gsum) * inv_t) as f32;
                            }
                        }
                    });
                }
            }
            Op::NllRows { logp, labels } => {
                if self.wants(*logp) {
                    let lv = self.value(*logp);
                    let classes = lv.dims2().expect("checked in forward").1;
                    accumulate(&mut adj[logp.0], lv.shape(), |d| {
                        for (r, &y) in labels.iter().enumerate() {
                            d[r * classes + y] -= g.data()[r];
                        }
                    });
                }
            }
            Op::ReplaceBlocks { src, fill, replaced } => {
                let width = self.value(*fill).len();
                if self.wants(*src) {
                    accumulate(&mut adj[src.0], g.shape(), |d| {
                        for ((db, gb), &r) in d.chunks_exact_mut(width).zip(g.data().chunks_exact(width)).zip(replaced) {
                            if !r {
                                db.iter_mut().zip(gb).for_each(|(x, &gv)| *x += gv);
                            }
                        }
                    });
                }
                if self.wants(*fill) {
                    let mut acc = vec![0.0f64; width];
                    for (gb, &r) in g.data().chunks_exact(width).zip(replaced) {
                        if r {
                            acc.iter_mut().zip(gb).for_each(|(a, &gv)| *a += f64::from(gv));
                        }
                    }
                    accumulate(&mut adj[fill.0], self.value(*fill).shape(), |d| {
                        d.iter_mut().zip(acc).for_each(|(x, a)| *x += a as f32)
                    });
                }
            }
            Op::DotConst { x, weights } => {
                if self.wants(*x) {
                    let gv = g.item();
                    accumulate(&mut adj[x.0], self.value(*x).shape(), |d| {
                        d.iter_mut().zip(weights).for_each(|(a, &w)| *a += gv * w)
                    });
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g);
                for (v, grad) in inputs.iter().zip(grads) {
                    if let (true, Some(grad)) = (self.wants(*v), grad) {
                        add_into(&mut adj[v.0], &grad);
                    }
                }
            }
        }
    }
}

/// `log sum_i exp(x_i / temperature)` in double precision; `-inf` entries
/// contribute nothing.
pub fn log_sum_exp(x: &[f32], temperature: f32) -> Result<f64> {
    let t = f64::from(temperature);
    let max = x
        .iter()
        .filter(|v| **v != f32::NEG_INFINITY)
        .map(|&v| f64::from(v) / t)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMasked);
    }
    let s: f64 = x
        .iter()
        .filter(|v| **v != f32::NEG_INFINITY)
        .map(|&v| (f64::from(v) / t - max).exp())
        .sum();
    Ok(max + s.ln())
}

/// Softmax of `logits / temperature` where `-inf` marks masked entries.
///
/// Masked entries come out as exactly zero.
pub fn softmax_with_temperature(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let lse = log_sum_exp(logits, temperature)?;
    let t = f64::from(temperature);
    Ok(logits
        .iter()
        .map(|&v| {
            if v == f32::NEG_INFINITY {
                0.0
            } else {
                (f64::from(v) / t - lse).exp() as f32
            }
        })
        .collect())
}

/// Mean negative log-likelihood over rows of a `[B, C]` log-distribution.
///
/// Rows must already be normalized (`logsumexp = 0` within `1e-5`).
pub fn cross_entropy(g: &mut Graph, logp: Var, labels: &[usize]) -> Result<Var> {
    let lv = g.value(logp);
    let (rows, cols) = lv.dims2()?;
    for r in 0..rows {
        let lse = log_sum_exp(&lv.data()[r * cols..(r + 1) * cols], 1.0)?;
        if lse.abs() > 1e-5 {
            return Err(Error::invalid(format!(
                "row {r} is not a log-distribution (logsumexp = {lse})"
            )));
        }
    }
    let nll = g.nll_rows(logp, labels)?;
    Ok(g.mean(nll))
}
