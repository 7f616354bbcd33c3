//! Fully-connected classifier with a contrastive projection head.
//!
//! The network has three parts, all packed into one flat parameter vector:
//!
//! - an encoder `f`: `input_dim -> hidden_dims... -> feature_dim`, ReLU after
//!   every layer (including the feature layer),
//! - a linear classifier on the features producing `num_classes` logits,
//! - a two-layer projection head `g(z) = W2 relu(W1 z)` (no biases) whose
//!   output is L2-normalized into a key of length `key_dim`.
//!
//! Gradients are exact (hand-written backprop) and always live in the same
//! flat coordinate system as [`ParamVector`], which is what the projection
//! step in [`crate::gradproj`] needs.

use std::ops::Deref;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GrclError, Result};
use crate::rng;

/// Floor added to every entry of a head output whose norm vanishes.
pub const KEY_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub head_hidden_dim: usize,
    pub key_dim: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("head_hidden_dim", self.head_hidden_dim),
            ("key_dim", self.key_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(GrclError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(GrclError::InvalidConfig(
                "hidden_dims entries must be >= 1".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(GrclError::InvalidConfig("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut cursor = 0;
        let mut dense = |out: usize, inp: usize, bias: bool| {
            let w = cursor;
            cursor += out * inp;
            let b = bias.then(|| {
                let b = cursor;
                cursor += out;
                b
            });
            Dense { w, b, out, inp }
        };
        let mut encoder = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.feature_dim)) {
            encoder.push(dense(h, prev, true));
            prev = h;
        }
        let classifier = dense(self.num_classes, self.feature_dim, true);
        let head_in = dense(self.head_hidden_dim, self.feature_dim, false);
        let head_out = dense(self.key_dim, self.head_hidden_dim, false);
        Layout {
            encoder,
            classifier,
            head_in,
            head_out,
            len: cursor,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    w: usize,
    b: Option<usize>,
    out: usize,
    inp: usize,
}

impl Dense {
    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out, self.inp), &p[self.w..self.w + self.out * self.inp])
            .expect("layout slices are sized by construction")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> Option<ArrayView1<'a, f64>> {
        self.b.map(|b| ArrayView1::from(&p[b..b + self.out]))
    }

    /// `x W^T + b`
    fn apply(&self, p: &[f64], x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight(p).t());
        if let Some(b) = self.bias(p) {
            z += &b;
        }
        z
    }

    fn accumulate(&self, grad: &mut [f64], upstream: &Array2<f64>, input: &ArrayView2<'_, f64>) {
        let gw = upstream.t().dot(input);
        for (dst, v) in grad[self.w..self.w + self.out * self.inp]
            .iter_mut()
            .zip(gw.iter())
        {
            *dst += v;
        }
        if let Some(b) = self.b {
            let gb = upstream.sum_axis(Axis(0));
            for (dst, v) in grad[b..b + self.out].iter_mut().zip(gb.iter()) {
                *dst += v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    encoder: Vec<Dense>,
    classifier: Dense,
    head_in: Dense,
    head_out: Dense,
    len: usize,
}

/// Flat gradient in the parameter coordinate system.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient(Vec<f64>);

impl FlatGradient {
    pub fn new(values: Vec<f64>) -> Self {
        FlatGradient(values)
    }

    pub fn zeros(len: usize) -> Self {
        FlatGradient(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn scaled(&self, c: f64) -> FlatGradient {
        FlatGradient(self.0.iter().map(|v| v * c).collect())
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, other: &[f64], c: f64) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += c * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for FlatGradient {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FlatGradient {
    fn from(v: Vec<f64>) -> Self {
        FlatGradient(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A labeled or unlabeled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(GrclError::InvalidInput("batch has no rows".into()));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.nrows() {
                return Err(GrclError::DimensionMismatch {
                    what: "batch labels",
                    expected: inputs.nrows(),
                    found: l.len(),
                });
            }
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows `idx` of this batch, in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// A scalar training objective whose gradient [`ParamVector::loss_gradient`]
/// can compute.
#[derive(Debug, Clone)]
pub enum LossSpec<'a> {
    /// Mean cross-entropy of the classifier logits.
    CrossEntropy {
        inputs: ArrayView2<'a, f64>,
        labels: &'a [usize],
    },
    /// Mean InfoNCE over anchor/positive pairs.
    InfoNce(ContrastiveTerms<'a>),
    /// `sum_i w_i * L_i`
    Weighted(Vec<(f64, LossSpec<'a>)>),
}

/// Inputs of one contrastive batch. Queries are keys of `anchors`, positives
/// are keys of `positives` (augmented anchors), both computed with the
/// current parameters. `negatives[i]` holds constant bank keys for row `i`.
#[derive(Debug, Clone)]
pub struct ContrastiveTerms<'a> {
    pub anchors: ArrayView2<'a, f64>,
    pub positives: ArrayView2<'a, f64>,
    pub negatives: &'a [Array2<f64>],
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct KeyOutput {
    pub keys: Array2<f64>,
    /// Rows whose head output had (near) zero norm and were shifted by
    /// [`KEY_EPSILON`] before normalization.
    pub degenerate_rows: usize,
}

/// Everything the backward pass needs.
struct Evaluation {
    layer_inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    features: Array2<f64>,
    logits: Array2<f64>,
    head_pre: Array2<f64>,
    head_hidden: Array2<f64>,
    keys: Array2<f64>,
    key_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec: Arc<ModelSpec>,
}

impl ParamVector {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut values = vec![0.0; layout.len];
        let mut rng = rng::seeded(seed, 0x1417);
        let dense = layout
            .encoder
            .iter()
            .chain([&layout.classifier, &layout.head_in, &layout.head_out]);
        for d in dense {
            let bound = (6.0 / (d.inp + d.out) as f64).sqrt();
            for v in &mut values[d.w..d.w + d.out * d.inp] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(ParamVector {
            values,
            spec: Arc::new(spec.clone()),
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ParamVector {
            values: vec![0.0; spec.param_count()],
            spec: Arc::new(spec.clone()),
        })
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_count();
        if values.len() != expected {
            return Err(GrclError::DimensionMismatch {
                what: "parameter vector",
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GrclError::InvalidInput(
                "parameter vector has non-finite entries".into(),
            ));
        }
        Ok(ParamVector {
            values,
            spec: Arc::new(spec.clone()),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.spec.input_dim {
            return Err(GrclError::DimensionMismatch {
                what: "input columns",
                expected: self.spec.input_dim,
                found: inputs.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
        self.check_inputs(&inputs)?;
        let layout = self.spec.layout();
        let features = encode(&self.values, &layout, inputs, None);
        let logits = layout.classifier.apply(&self.values, &features.view());
        Ok(ForwardOutput { features, logits })
    }

    /// Unit-norm keys `g(features) / |g(features)|`.
    pub fn project_key(&self, features: ArrayView2<'_, f64>) -> Result<KeyOutput> {
        if features.ncols() != self.spec.feature_dim {
            return Err(GrclError::DimensionMismatch {
                what: "feature columns",
                expected: self.spec.feature_dim,
                found: features.ncols(),
            });
        }
        let layout = self.spec.layout();
        let (_, hidden) = head_hidden(&self.values, &layout, &features);
        let raw = layout.head_out.apply(&self.values, &hidden.view());
        let (keys, _, degenerate_rows) = normalize_rows(raw);
        Ok(KeyOutput {
            keys,
            degenerate_rows,
        })
    }

    /// `project_key(forward(inputs).features)`.
    pub fn embed(&self, inputs: ArrayView2<'_, f64>) -> Result<KeyOutput> {
        let out = self.forward(inputs)?;
        self.project_key(out.features.view())
    }

    /// Argmax class per row, ties toward the lowest index.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let out = self.forward(inputs)?;
        Ok(out.logits.rows().into_iter().map(argmax).collect())
    }

    pub fn loss(&self, spec: &LossSpec<'_>) -> Result<f64> {
        self.loss_impl(spec, false).map(|(l, _)| l)
    }

    /// Value and exact gradient of a scalar loss.
    pub fn loss_gradient(&self, spec: &LossSpec<'_>) -> Result<(f64, FlatGradient)> {
        self.loss_impl(spec, true)
            .map(|(l, g)| (l, g.expect("gradient requested")))
    }

    fn loss_impl(
        &self,
        spec: &LossSpec<'_>,
        want_grad: bool,
    ) -> Result<(f64, Option<FlatGradient>)> {
        match spec {
            LossSpec::CrossEntropy { inputs, labels } => {
                self.check_inputs(inputs)?;
                if labels.len() != inputs.nrows() {
                    return Err(GrclError::DimensionMismatch {
                        what: "labels",
                        expected: inputs.nrows(),
                        found: labels.len(),
                    });
                }
                if inputs.nrows() == 0 {
                    return Err(GrclError::InvalidInput("empty batch".into()));
                }
                let ev = self.evaluate(inputs.view());
                let (loss, d_logits) = ce_with_grad(&ev.logits, labels)?;
                let grad = want_grad.then(|| self.backward(&ev, Some(&d_logits), None));
                Ok((loss, grad))
            }
            LossSpec::InfoNce(terms) => self.info_nce_impl(terms, want_grad),
            LossSpec::Weighted(parts) => {
                let mut total = 0.0;
                let mut grad = want_grad.then(|| FlatGradient::zeros(self.len()));
                for (w, part) in parts {
                    let (l, g) = self.loss_impl(part, want_grad)?;
                    total += w * l;
                    if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                        acc.add_scaled(&g, *w);
                    }
                }
                Ok((total, grad))
            }
        }
    }

    fn info_nce_impl(
        &self,
        terms: &ContrastiveTerms<'_>,
        want_grad: bool,
    ) -> Result<(f64, Option<FlatGradient>)> {
        if !(terms.temperature > 0.0) {
            return Err(GrclError::InvalidConfig("temperature must be > 0".into()));
        }
        self.check_inputs(&terms.anchors)?;
        self.check_inputs(&terms.positives)?;
        let b = terms.anchors.nrows();
        if b == 0 {
            return Err(GrclError::InvalidInput("empty contrastive batch".into()));
        }
        if terms.positives.nrows() != b || terms.negatives.len() != b {
            return Err(GrclError::DimensionMismatch {
                what: "contrastive batch rows",
                expected: b,
                found: terms.positives.nrows().min(terms.negatives.len()),
            });
        }
        for neg in terms.negatives {
            if neg.nrows() > 0 && neg.ncols() != self.spec.key_dim {
                return Err(GrclError::DimensionMismatch {
                    what: "negative key columns",
                    expected: self.spec.key_dim,
                    found: neg.ncols(),
                });
            }
        }
        let stacked = ndarray::concatenate(Axis(0), &[terms.anchors, terms.positives])
            .expect("column counts checked");
        let ev = self.evaluate(stacked.view());
        let mut d_keys = Array2::zeros(ev.keys.raw_dim());
        let mut total = 0.0;
        let scale = 1.0 / b as f64;
        for i in 0..b {
            let q = ev.keys.row(i);
            let p = ev.keys.row(b + i);
            let (l, dq, dp) =
                crate::contrast::info_nce_with_grad(q, p, terms.negatives[i].view(), terms.temperature);
            total += l;
            if want_grad {
                d_keys.row_mut(i).scaled_add(scale, &dq);
                d_keys.row_mut(b + i).scaled_add(scale, &dp);
            }
        }
        let grad = want_grad.then(|| self.backward(&ev, None, Some(&d_keys)));
        Ok((total * scale, grad))
    }

    /// `params - lr * grad`; refuses non-finite gradients.
    pub fn sgd_step(&self, grad: &[f64], lr: f64) -> Result<ParamVector> {
        if grad.len() != self.values.len() {
            return Err(GrclError::DimensionMismatch {
                what: "gradient",
                expected: self.values.len(),
                found: grad.len(),
            });
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(GrclError::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(GrclError::Divergence(format!(
                "non-finite gradient entry at coordinate {i}"
            )));
        }
        let values = self
            .values
            .iter()
            .zip(grad)
            .map(|(p, g)| p - lr * g)
            .collect();
        Ok(ParamVector {
            values,
            spec: Arc::clone(&self.spec),
        })
    }

    fn evaluate(&self, inputs: ArrayView2<'_, f64>) -> Evaluation {
        let layout = self.spec.layout();
        let p = &self.values;
        let mut layer_inputs = Vec::with_capacity(layout.encoder.len());
        let mut pre = Vec::with_capacity(layout.encoder.len());
        let features = encode(p, &layout, inputs, Some((&mut layer_inputs, &mut pre)));
        let logits = layout.classifier.apply(p, &features.view());
        let (head_pre, head_hidden) = head_hidden(p, &layout, &features.view());
        let raw = layout.head_out.apply(p, &head_hidden.view());
        let (keys, key_norms, _) = normalize_rows(raw);
        Evaluation {
            layer_inputs,
            pre,
            features,
            logits,
            head_pre,
            head_hidden,
            keys,
            key_norms,
        }
    }

    fn backward(
        &self,
        ev: &Evaluation,
        d_logits: Option<&Array2<f64>>,
        d_keys: Option<&Array2<f64>>,
    ) -> FlatGradient {
        let layout = self.spec.layout();
        let p = &self.values;
        let mut grad = vec![0.0; layout.len];
        let mut d_act = Array2::<f64>::zeros(ev.features.raw_dim());

        if let Some(dl) = d_logits {
            layout.classifier.accumulate(&mut grad, dl, &ev.features.view());
            d_act += &dl.dot(&layout.classifier.weight(p));
        }

        if let Some(dk) = d_keys {
            // d/dh of h/|h| applied to dk: (dk - k (k . dk)) / |h|
            let mut d_raw = dk.clone();
            for ((mut row, k), &n) in d_raw
                .rows_mut()
                .into_iter()
                .zip(ev.keys.rows())
                .zip(&ev.key_norms)
            {
                let proj = row.dot(&k);
                row.scaled_add(-proj, &k);
                row /= n;
            }
            layout
                .head_out
                .accumulate(&mut grad, &d_raw, &ev.head_hidden.view());
            let mut d_hidden = d_raw.dot(&layout.head_out.weight(p));
            relu_mask(&mut d_hidden, &ev.head_pre);
            layout
                .head_in
                .accumulate(&mut grad, &d_hidden, &ev.features.view());
            d_act += &d_hidden.dot(&layout.head_in.weight(p));
        }

        for (l, dense) in layout.encoder.iter().enumerate().rev() {
            relu_mask(&mut d_act, &ev.pre[l]);
            dense.accumulate(&mut grad, &d_act, &ev.layer_inputs[l].view());
            if l > 0 {
                d_act = d_act.dot(&dense.weight(p));
            }
        }
        FlatGradient(grad)
    }
}

fn encode(
    p: &[f64],
    layout: &Layout,
    inputs: ArrayView2<'_, f64>,
    mut cache: Option<(&mut Vec<Array2<f64>>, &mut Vec<Array2<f64>>)>,
) -> Array2<f64> {
    let mut act = inputs.to_owned();
    for dense in &layout.encoder {
        let z = dense.apply(p, &act.view());
        let next = z.mapv(relu);
        if let Some((inputs, pre)) = cache.as_mut() {
            inputs.push(std::mem::replace(&mut act, next));
            pre.push(z);
        } else {
            act = next;
        }
    }
    act
}

fn head_hidden(p: &[f64], layout: &Layout, features: &ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let pre = layout.head_in.apply(p, features);
    let hidden = pre.mapv(relu);
    (pre, hidden)
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Zeroes upstream entries where the pre-activation was not positive
/// (subgradient 0 at 0).
fn relu_mask(upstream: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(upstream).and(pre).for_each(|u, &z| {
        if z <= 0.0 {
            *u = 0.0;
        }
    });
}

/// Row-wise L2 normalization. Returns the keys, the norm each row was divided
/// by, and how many rows needed the epsilon shift.
pub(crate) fn normalize_rows(mut raw: Array2<f64>) -> (Array2<f64>, Vec<f64>, usize) {
    let mut norms = Vec::with_capacity(raw.nrows());
    let mut degenerate = 0;
    for mut row in raw.rows_mut() {
        let mut n = row.dot(&row).sqrt();
        if n < KEY_EPSILON {
            degenerate += 1;
            row += KEY_EPSILON;
            n = row.dot(&row).sqrt();
        }
        row /= n;
        norms.push(n);
    }
    (raw, norms, degenerate)
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean cross-entropy `-log softmax(logits)[label]`.
pub fn ce_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    ce_with_grad(logits, labels).map(|(l, _)| l)
}

fn ce_with_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let classes = logits.ncols();
    if labels.len() != logits.nrows() {
        return Err(GrclError::DimensionMismatch {
            what: "labels",
            expected: logits.nrows(),
            found: labels.len(),
        });
    }
    if logits.nrows() == 0 {
        return Err(GrclError::InvalidInput("empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(GrclError::LabelOutOfRange { label, classes });
    }
    let b = logits.nrows() as f64;
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
        row[y] -= 1.0;
    }
    probs /= b;
    Ok((loss / b, probs))
}

/// Convenience for the gradient of `ce_loss` on a labeled batch.
pub fn ce_gradient(params: &ParamVector, batch: &Batch) -> Result<(f64, FlatGradient)> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| GrclError::InvalidInput("cross-entropy needs a labeled batch".into()))?;
    params.loss_gradient(&LossSpec::CrossEntropy {
        inputs: batch.inputs.view(),
        labels,
    })
}
