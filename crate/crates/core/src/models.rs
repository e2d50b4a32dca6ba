//! Small differentiable classifiers with closed-form cross-entropy gradients.
//!
//! Parameters are stored flat. The linear model packs `W[C×D]` then `b[C]`;
//! the one-hidden-layer MLP packs `W1[H×D]`, `b1[H]`, `W2[C×H]`, `b2[C]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numvec::{ParamVector, TensorLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    /// The relu subgradient at 0 is 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearSoftmax {
        input_dim: usize,
        num_classes: usize,
    },
    #[serde(rename = "mlp")]
    Mlp {
        input_dim: usize,
        num_classes: usize,
        hidden_dim: usize,
        activation: Activation,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(FedError::invalid("num_classes must be at least 2"));
        }
        if self.input_dim() < 1 {
            return Err(FedError::invalid("input_dim must be at least 1"));
        }
        if let ModelSpec::Mlp { hidden_dim: 0, .. } = self {
            return Err(FedError::invalid("hidden_dim must be at least 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::LinearSoftmax { input_dim, .. } | ModelSpec::Mlp { input_dim, .. } => {
                input_dim
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelSpec::LinearSoftmax { num_classes, .. } | ModelSpec::Mlp { num_classes, .. } => {
                num_classes
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            ModelSpec::LinearSoftmax {
                input_dim,
                num_classes,
            } => num_classes * input_dim + num_classes,
            ModelSpec::Mlp {
                input_dim,
                num_classes,
                hidden_dim,
                ..
            } => hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes,
        }
    }

    pub fn layout(&self) -> TensorLayout {
        let shapes = match *self {
            ModelSpec::LinearSoftmax {
                input_dim,
                num_classes,
            } => vec![vec![num_classes, input_dim], vec![num_classes]],
            ModelSpec::Mlp {
                input_dim,
                num_classes,
                hidden_dim,
                ..
            } => vec![
                vec![hidden_dim, input_dim],
                vec![hidden_dim],
                vec![num_classes, hidden_dim],
                vec![num_classes],
            ],
        };
        TensorLayout::new(shapes).expect("validated model spec has non-empty tensors")
    }

    /// Initial parameters. The linear model starts at zero; MLP weight
    /// matrices are uniform in `±1/sqrt(fan_in)` with zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut w = vec![0.0; self.num_params()];
        if let ModelSpec::Mlp {
            input_dim,
            num_classes,
            hidden_dim,
            ..
        } = *self
        {
            let w1 = hidden_dim * input_dim;
            let w2_start = w1 + hidden_dim;
            let bound1 = 1.0 / (input_dim as f64).sqrt();
            let bound2 = 1.0 / (hidden_dim as f64).sqrt();
            for v in &mut w[..w1] {
                *v = rng.random_range(-bound1..=bound1);
            }
            for v in &mut w[w2_start..w2_start + num_classes * hidden_dim] {
                *v = rng.random_range(-bound2..=bound2);
            }
        }
        ParamVector::new(w)
    }
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(FedError::invalid(format!(
                "feature matrix of {} values does not hold {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(FedError::invalid("batch must contain at least one row"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FedError::invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(FedError::NonFinite(format!(
                "feature at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Batch {
            features,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.rows() {
                return Err(FedError::invalid(format!("row index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.dim, labels, self.num_classes)
    }
}

fn check_compat(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<()> {
    w.check_len(spec.num_params())?;
    if batch.dim() != spec.input_dim() {
        return Err(FedError::Dimension {
            expected: spec.input_dim(),
            found: batch.dim(),
        });
    }
    if batch.num_classes() > spec.num_classes() {
        return Err(FedError::invalid(format!(
            "batch has {} classes, model has {}",
            batch.num_classes(),
            spec.num_classes()
        )));
    }
    Ok(())
}

/// Writes softmax probabilities into `logits` and returns `-ln p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let log_sum = sum.ln();
    let loss = log_sum - (logits[label].ln());
    for z in logits.iter_mut() {
        *z /= sum;
    }
    loss
}

struct Forward {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(spec: &ModelSpec, w: &[f64], x: &[f64], out: &mut Forward) {
    match *spec {
        ModelSpec::LinearSoftmax {
            input_dim,
            num_classes,
        } => {
            let bias = &w[num_classes * input_dim..];
            for c in 0..num_classes {
                let row = &w[c * input_dim..(c + 1) * input_dim];
                out.logits[c] = dot(row, x) + bias[c];
            }
        }
        ModelSpec::Mlp {
            input_dim,
            num_classes,
            hidden_dim,
            activation,
        } => {
            let (w1, rest) = w.split_at(hidden_dim * input_dim);
            let (b1, rest) = rest.split_at(hidden_dim);
            let (w2, b2) = rest.split_at(num_classes * hidden_dim);
            for h in 0..hidden_dim {
                let pre = dot(&w1[h * input_dim..(h + 1) * input_dim], x) + b1[h];
                out.hidden_pre[h] = pre;
                out.hidden[h] = activation.apply(pre);
            }
            for c in 0..num_classes {
                out.logits[c] = dot(&w2[c * hidden_dim..(c + 1) * hidden_dim], &out.hidden) + b2[c];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Forward {
    fn new(spec: &ModelSpec) -> Self {
        let hidden = match *spec {
            ModelSpec::Mlp { hidden_dim, .. } => hidden_dim,
            ModelSpec::LinearSoftmax { .. } => 0,
        };
        Forward {
            hidden_pre: vec![0.0; hidden],
            hidden: vec![0.0; hidden],
            logits: vec![0.0; spec.num_classes()],
        }
    }
}

/// Mean cross-entropy and its exact gradient over all rows of `batch`.
pub fn loss_and_grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    let rows: Vec<usize> = (0..batch.rows()).collect();
    loss_and_grad_rows(spec, w, batch, &rows)
}

/// Same as [`loss_and_grad`] restricted to a subset of rows.
pub fn loss_and_grad_rows(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &Batch,
    rows: &[usize],
) -> Result<(f64, ParamVector)> {
    check_compat(spec, w, batch)?;
    if rows.is_empty() {
        return Err(FedError::invalid("empty row selection"));
    }
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; spec.num_params()];
    let mut fwd = Forward::new(spec);
    let mut total = 0.0;
    let wv = w.as_slice();
    for &r in rows {
        let x = batch.row(r);
        let label = batch.labels()[r];
        forward(spec, wv, x, &mut fwd);
        total += softmax_xent(&mut fwd.logits, label);
        // dL/dlogits = softmax - onehot
        fwd.logits[label] -= 1.0;
        let dlogits = &fwd.logits;
        match *spec {
            ModelSpec::LinearSoftmax {
                input_dim,
                num_classes,
            } => {
                let (gw, gb) = grad.split_at_mut(num_classes * input_dim);
                for c in 0..num_classes {
                    let d = dlogits[c] * scale;
                    for (g, xi) in gw[c * input_dim..(c + 1) * input_dim].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                    gb[c] += d;
                }
            }
            ModelSpec::Mlp {
                input_dim,
                num_classes,
                hidden_dim,
                activation,
            } => {
                let w2 = &wv[hidden_dim * input_dim + hidden_dim..];
                let (gw1, rest) = grad.split_at_mut(hidden_dim * input_dim);
                let (gb1, rest) = rest.split_at_mut(hidden_dim);
                let (gw2, gb2) = rest.split_at_mut(num_classes * hidden_dim);
                let mut dhidden = vec![0.0; hidden_dim];
                for c in 0..num_classes {
                    let d = dlogits[c] * scale;
                    let w2_row = &w2[c * hidden_dim..(c + 1) * hidden_dim];
                    for h in 0..hidden_dim {
                        gw2[c * hidden_dim + h] += d * fwd.hidden[h];
                        dhidden[h] += d * w2_row[h];
                    }
                    gb2[c] += d;
                }
                for h in 0..hidden_dim {
                    let dpre = dhidden[h] * activation.derivative(fwd.hidden_pre[h], fwd.hidden[h]);
                    if dpre == 0.0 {
                        continue;
                    }
                    for (g, xi) in gw1[h * input_dim..(h + 1) * input_dim].iter_mut().zip(x) {
                        *g += dpre * xi;
                    }
                    gb1[h] += dpre;
                }
            }
        }
    }
    Ok((total * scale, ParamVector::new(grad)))
}

/// Mean cross-entropy only.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    check_compat(spec, w, batch)?;
    let mut fwd = Forward::new(spec);
    let mut total = 0.0;
    for r in 0..batch.rows() {
        forward(spec, w.as_slice(), batch.row(r), &mut fwd);
        total += softmax_xent(&mut fwd.logits, batch.labels()[r]);
    }
    Ok(total / batch.rows() as f64)
}

/// Central-difference estimate of the gradient of an arbitrary scalar function.
pub fn central_difference<F>(f: F, w: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(FedError::invalid("finite-difference step must be positive"));
    }
    let mut probe = w.clone();
    let mut out = Vec::with_capacity(w.len());
    for k in 0..w.len() {
        let orig = probe[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[k] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamVector::new(out))
}

/// Finite-difference gradient of the mean cross-entropy, used to check
/// [`loss_and_grad`].
pub fn finite_diff_grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch, h: f64) -> Result<ParamVector> {
    check_compat(spec, w, batch)?;
    central_difference(|p| loss(spec, p, batch), w, h)
}

/// Fraction of rows whose arg-max logit equals the label. Ties go to the
/// lowest class index.
pub fn predict_accuracy(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    check_compat(spec, w, batch)?;
    if batch.rows() == 0 {
        return Err(FedError::invalid("accuracy of an empty batch"));
    }
    let mut fwd = Forward::new(spec);
    let mut correct = 0usize;
    for r in 0..batch.rows() {
        forward(spec, w.as_slice(), batch.row(r), &mut fwd);
        if argmax(&fwd.logits) == batch.labels()[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.rows() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
