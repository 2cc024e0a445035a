//! MLP building blocks, the retrieval-augmented classifier and the plain
//! no-context baseline.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stack of affine layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`. Weights and biases are drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("mlp `{name}` needs at least two positive widths, got {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
            let weight = Tensor::from_parts(vec![fan_out, fan_in], draw(fan_out * fan_in));
            let bias = Tensor::from_parts(vec![fan_out], draw(fan_out));
            let wid = store.add(format!("{name}.{l}.weight"), group, weight);
            let bid = store.add(format!("{name}.{l}.bias"), group, bias);
            layers.push((wid, bid));
        }
        Ok(Self {
            layers,
            dims: dims.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two widths")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            h = g.linear(h, wv, bv)?;
            if l + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the stem output and of every hidden layer.
    pub hidden_width: usize,
    pub query_hidden_layers: usize,
    pub classifier_hidden_layers: usize,
    /// Blend learned queries with the first `d` input coordinates.
    pub residual_query: bool,
    /// Initial blend logit; `sigmoid(0) = 0.5`.
    pub residual_alpha_init: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_width: 512,
            query_hidden_layers: 1,
            classifier_hidden_layers: 1,
            residual_query: false,
            residual_alpha_init: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::config("model.hidden_width", "must be positive"));
        }
        if !self.residual_alpha_init.is_finite() {
            return Err(Error::config("model.residual_alpha_init", "must be finite"));
        }
        Ok(())
    }
}

/// Sizes fixed by the data rather than by the model config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub key_dim: usize,
    pub kappa: usize,
    /// Width of one retrieved item as fed to the classifier.
    pub payload_dim: usize,
    pub classes: usize,
}

/// Shared stem, query generator and classifier with their null tokens.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub params: ParamStore,
    pub config: ModelConfig,
    pub shape: ModelShape,
    stem: Mlp,
    query_head: Mlp,
    classifier: Mlp,
    stem_null: ParamId,
    payload_null: ParamId,
    blend_alpha: Option<ParamId>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, shape: ModelShape, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ModelShape {
            input_dim,
            key_dim,
            kappa,
            payload_dim,
            classes,
        } = shape;
        if input_dim == 0 || key_dim == 0 || kappa == 0 || payload_dim == 0 || classes < 2 {
            return Err(Error::invalid(format!("degenerate model shape {shape:?}")));
        }
        if config.residual_query && input_dim < key_dim {
            return Err(Error::config(
                "model.residual_query",
                format!("needs input_dim {input_dim} >= key_dim {key_dim}"),
            ));
        }
        let h = config.hidden_width;
        let mut params = ParamStore::new();
        let stem = Mlp::new(&mut params, "stem", ParamGroup::Other, &[input_dim, h], rng)?;
        let mut qdims = vec![h; config.query_hidden_layers + 1];
        qdims.push(kappa * key_dim);
        let query_head = Mlp::new(&mut params, "query", ParamGroup::Retrieval, &qdims, rng)?;
        let mut cdims = vec![h + kappa * payload_dim];
        cdims.extend(std::iter::repeat_n(h, config.classifier_hidden_layers));
        cdims.push(classes);
        let classifier = Mlp::new(&mut params, "classifier", ParamGroup::Other, &cdims, rng)?;
        let mut token = |n: usize| -> Tensor { Tensor::from_parts(vec![n], (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect()) };
        let stem_null = params.add("stem_null", ParamGroup::Other, token(h));
        let payload_null = params.add("payload_null", ParamGroup::Other, token(payload_dim));
        let blend_alpha = config.residual_query.then(|| {
            params.add(
                "query_blend_alpha",
                ParamGroup::Retrieval,
                Tensor::vector(vec![config.residual_alpha_init]),
            )
        });
        Ok(Self {
            params,
            config,
            shape,
            stem,
            query_head,
            classifier,
            stem_null,
            payload_null,
            blend_alpha,
        })
    }

    /// ReLU stem output `[B, H]`.
    pub fn stem(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, &self.params, x)?;
        Ok(g.relu(h))
    }

    /// Queries `[B, κ·d]`. `x` must be the raw input when residual blending
    /// is on; its first `d` coordinates are the similarity query for every
    /// retrieval slot.
    pub fn queries(&self, g: &mut Graph, stem_out: Var, x: Var) -> Result<Var> {
        let learned = self.query_head.forward(g, &self.params, stem_out)?;
        let Some(alpha) = self.blend_alpha else {
            return Ok(learned);
        };
        let xv = g.value(x);
        let (rows, cols) = xv.dims2()?;
        let (k, d) = (self.shape.kappa, self.shape.key_dim);
        let mut sim = Vec::with_capacity(rows * k * d);
        for r in 0..rows {
            let head = &xv.data()[r * cols..r * cols + d];
            for _ in 0..k {
                sim.extend_from_slice(head);
            }
        }
        let sim = g.constant(Tensor::from_parts(vec![rows, k * d], sim));
        let a = g.param(&self.params, alpha);
        crate::retrieval::residual_query_blend(g, learned, sim, a)
    }

    /// Row-wise log-probabilities `[B, classes]`.
    ///
    /// `payloads` is `[B, κ·P]`. Rows flagged in `stem_dropped` see the stem
    /// null token instead of the stem output; items flagged in
    /// `payload_dropped` (`B·κ` flags) see the payload null token.
    pub fn classify(
        &self,
        g: &mut Graph,
        stem_out: Var,
        payloads: Var,
        stem_dropped: Option<&[bool]>,
        payload_dropped: Option<&[bool]>,
    ) -> Result<Var> {
        let mut direct = stem_out;
        if let Some(mask) = stem_dropped.filter(|m| m.iter().any(|&b| b)) {
            let null = g.param(&self.params, self.stem_null);
            direct = g.replace_blocks(direct, null, mask)?;
        }
        let mut items = payloads;
        if let Some(mask) = payload_dropped.filter(|m| m.iter().any(|&b| b)) {
            let null = g.param(&self.params, self.payload_null);
            items = g.replace_blocks(items, null, mask)?;
        }
        let joined = g.concat_cols(&[direct, items])?;
        let logits = self.classifier.forward(g, &self.params, joined)?;
        g.log_softmax(logits, 1.0)
    }

    /// Current blend coefficient `α`, when residual blending is on.
    pub fn blend_alpha(&self) -> Option<f32> {
        self.blend_alpha
            .map(|id| 1.0 / (1.0 + (-self.params.value(id).item()).exp()))
    }

    /// Zeroes the classifier's first-layer weights that read retrieved
    /// payloads, so predictions ignore retrieval.
    pub fn zero_payload_weights(&mut self) {
        let (w, _) = self.classifier.layers[0];
        let h = self.config.hidden_width;
        let t = self.params.value_mut(w);
        let cols = t.shape()[1];
        for row in t.data_mut().chunks_exact_mut(cols) {
            row[h..].fill(0.0);
        }
    }
}

/// Plain MLP classifier on the inputs alone.
#[derive(Clone, Debug)]
pub struct NoContextModel {
    pub params: ParamStore,
    net: Mlp,
}

impl NoContextModel {
    pub fn new(input_dim: usize, hidden_width: usize, hidden_layers: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(hidden_width, hidden_layers));
        dims.push(classes);
        let mut params = ParamStore::new();
        let net = Mlp::new(&mut params, "baseline", ParamGroup::Other, &dims, rng)?;
        Ok(Self { params, net })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn log_probs(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = self.net.forward(g, &self.params, x)?;
        g.log_softmax(logits, 1.0)
    }
}

/// Index of the largest entry of each `[rows, cols]` row, lowest on ties.
pub fn row_argmax(t: &Tensor) -> Result<Vec<usize>> {
    let (rows, cols) = t.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}
