//! Feed-forward classifier: affine+nonlinearity encoder blocks followed by a
//! linear head.
//!
//! Parameters are stored as `f32`; the forward and backward passes run in
//! `f64` and round once when results are handed back.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Head, Layer, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Architecture of a classifier. The last hidden width is the feature dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.input_dim == 0 || self.class_count == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated spec has a hidden layer")
    }

    pub fn depth(&self) -> usize {
        self.hidden_dims.len()
    }

    fn build(&self, mut fill: impl FnMut(usize, usize, bool) -> Vec<f32>, head_bias: bool) -> Result<ParameterSet> {
        self.validate()?;
        let mut encoder = Vec::with_capacity(self.depth());
        let mut width = self.input_dim;
        for (i, &out) in self.hidden_dims.iter().enumerate() {
            encoder.push(Layer {
                name: format!("block{i}"),
                weights: Tensor::matrix(width, out, fill(width, out, false))?,
                bias: Tensor::from_vec(vec![0.0; out])?,
            });
            width = out;
        }
        let head = Head {
            weights: Tensor::matrix(width, self.class_count, fill(width, self.class_count, true))?,
            bias: if head_bias { Some(Tensor::from_vec(vec![0.0; self.class_count])?) } else { None },
        };
        ParameterSet::new(encoder, head, self.activation)
    }

    /// All-zero parameters with a head bias.
    pub fn zeros(&self) -> Result<ParameterSet> {
        self.build(|i, o, _| vec![0.0; i * o], true)
    }

    /// Random initialization: encoder weights with fan-in scaled Gaussians,
    /// zero biases, head weights `N(0, head_scale^2)`.
    pub fn init(&self, rng: &mut impl Rng, head_scale: f64) -> Result<ParameterSet> {
        let gain = match self.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        self.build(
            |fan_in, fan_out, is_head| {
                let std = if is_head { head_scale } else { (gain / fan_in as f64).sqrt() };
                let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
                (0..fan_in * fan_out).map(|_| dist.sample(rng) as f32).collect()
            },
            true,
        )
    }
}

/// Output of a forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Raw logits, `n x C`.
    pub logits: Tensor,
    /// `softmax(logits / temperature)`, `n x C`.
    pub probabilities: Tensor,
    pub predicted_class: Vec<usize>,
    pub temperature: f64,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.predicted_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted_class.is_empty()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self.predicted_class.iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len() as f64
    }

    /// Builds a prediction from row-stochastic probabilities, with logits
    /// chosen so that `softmax(logits / temperature)` reproduces them.
    pub(crate) fn from_probabilities(probs: Vec<f64>, rows: usize, classes: usize, temperature: f64) -> Result<Self> {
        let floor = (f32::MIN_POSITIVE as f64).ln();
        let logits: Vec<f32> =
            probs.iter().map(|&p| (temperature * if p > 0.0 { p.ln().max(floor) } else { floor }) as f32).collect();
        let probabilities: Vec<f32> = probs.iter().map(|&p| p as f32).collect();
        let predicted_class = argmax_rows(&probabilities, classes);
        Ok(Prediction {
            logits: Tensor::matrix(rows, classes, logits)?,
            probabilities: Tensor::matrix(rows, classes, probabilities)?,
            predicted_class,
            temperature,
        })
    }
}

/// First maximal index of each row.
pub fn argmax_rows(values: &[f32], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Layer outputs of one forward pass in `f64`.
pub(crate) struct ForwardTrace {
    pub rows: usize,
    /// `activations[0]` is the input, `activations[l + 1]` the output of block `l`.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

fn affine(input: &[f64], rows: usize, weights: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (in_dim, out_dim) = (weights.shape()[0], weights.shape()[1]);
    let w = weights.data();
    let mut out = vec![0.0f64; rows * out_dim];
    for r in 0..rows {
        let x = &input[r * in_dim..(r + 1) * in_dim];
        let o = &mut out[r * out_dim..(r + 1) * out_dim];
        if let Some(b) = bias {
            for (oj, &bj) in o.iter_mut().zip(b.data()) {
                *oj = bj as f64;
            }
        }
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for (oj, &wkj) in o.iter_mut().zip(wk) {
                *oj += xk * wkj as f64;
            }
        }
    }
    out
}

fn check_input(params: &ParameterSet, features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 || features.cols() != params.meta().input_dim {
        return Err(Error::Shape(format!(
            "batch of shape {:?} for a model with input width {}",
            features.shape(),
            params.meta().input_dim
        )));
    }
    Ok(())
}

pub(crate) fn trace(params: &ParameterSet, features: &Tensor) -> Result<ForwardTrace> {
    check_input(params, features)?;
    let rows = features.rows();
    let act = params.activation();
    let mut activations = Vec::with_capacity(params.encoder().len() + 1);
    activations.push(features.data().iter().map(|&v| v as f64).collect::<Vec<f64>>());
    for layer in params.encoder() {
        let mut h = affine(activations.last().unwrap(), rows, &layer.weights, Some(&layer.bias));
        h.iter_mut().for_each(|v| *v = act.apply(*v));
        activations.push(h);
    }
    let head = params.head();
    let logits = affine(activations.last().unwrap(), rows, &head.weights, head.bias.as_ref());
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("forward pass produced non-finite logits".into()));
    }
    Ok(ForwardTrace { rows, activations, logits })
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Softmax of one row of logits divided by `temperature`, in `f64`.
pub(crate) fn softmax_row(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`, computed as
/// `ln S - sum_c e_c u_c / S` with `u = (z - max z) / temperature`.
pub(crate) fn entropy_from_logits(logits: &[f64], temperature: f64) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    let mut weighted = 0.0;
    for z in logits {
        let u = (z - m) / temperature;
        let e = u.exp();
        s += e;
        weighted += e * u;
    }
    let h = s.ln() - weighted / s;
    h.clamp(0.0, (logits.len() as f64).ln())
}

/// Per-row entropies of the model's tempered softmax on `features`.
pub(crate) fn row_entropies(params: &ParameterSet, features: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let t = trace(params, features)?;
    let c = params.meta().class_count;
    Ok(t.logits.chunks(c).map(|row| entropy_from_logits(row, temperature)).collect())
}

pub fn forward(params: &ParameterSet, batch: &Batch, temperature: f64) -> Result<Prediction> {
    forward_features(params, batch.features(), temperature)
}

pub(crate) fn forward_features(params: &ParameterSet, features: &Tensor, temperature: f64) -> Result<Prediction> {
    check_temperature(temperature)?;
    let t = trace(params, features)?;
    let c = params.meta().class_count;
    let mut probabilities = Vec::with_capacity(t.logits.len());
    for row in t.logits.chunks(c) {
        probabilities.extend(softmax_row(row, temperature).into_iter().map(|p| p as f32));
    }
    let predicted_class = argmax_rows(&probabilities, c);
    Ok(Prediction {
        logits: Tensor::matrix(t.rows, c, t.logits.iter().map(|&v| v as f32).collect())?,
        probabilities: Tensor::matrix(t.rows, c, probabilities)?,
        predicted_class,
        temperature,
    })
}

/// Per-row Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(probabilities: &Tensor) -> Result<Vec<f64>> {
    let c = probabilities.cols();
    let mut out = Vec::with_capacity(probabilities.rows());
    for (r, row) in probabilities.data().chunks(c).enumerate() {
        let mut sum = 0.0;
        let mut h = 0.0;
        for &p in row {
            let p = p as f64;
            if p < -1e-9 {
                return Err(Error::InvalidDistribution(format!("row {r} has negative probability {p}")));
            }
            if p > 0.0 {
                h -= p * p.ln();
            }
            sum += p.max(0.0);
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidDistribution(format!("row {r} sums to {sum}")));
        }
        out.push(h.clamp(0.0, (c as f64).ln()));
    }
    Ok(out)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label { label: y as i64, classes });
    }
    Ok(())
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy_loss(pred: &Prediction, labels: &[usize]) -> Result<f64> {
    let c = pred.logits.cols();
    check_labels(labels, pred.logits.rows(), c)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    let mut total = 0.0;
    for (row, &y) in pred.logits.data().chunks(c).zip(labels) {
        let z: Vec<f64> = row.iter().map(|&v| v as f64 / pred.temperature).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += (lse - z[y]).max(0.0);
    }
    Ok(total / labels.len() as f64)
}

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of gradient evaluations performed on the current thread.
pub fn backward_call_count() -> u64 {
    BACKWARD_CALLS.with(|c| c.get())
}

/// Mean cross-entropy (temperature 1) and its gradient for every parameter.
pub fn loss_and_gradient(params: &ParameterSet, features: &Tensor, labels: &[usize]) -> Result<(f64, ParameterSet)> {
    BACKWARD_CALLS.with(|c| c.set(c.get() + 1));
    let t = trace(params, features)?;
    let n = t.rows;
    let classes = params.meta().class_count;
    check_labels(labels, n, classes)?;
    if n == 0 {
        return Err(Error::EmptyDataset("no samples for gradient".into()));
    }
    let act = params.activation();
    let inv_n = 1.0 / n as f64;

    // dL/dlogits = (softmax - onehot) / n
    let mut loss = 0.0;
    let mut delta = Vec::with_capacity(n * classes);
    for (row, &y) in t.logits.chunks(classes).zip(labels) {
        let p = softmax_row(row, 1.0);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, pc) in p.into_iter().enumerate() {
            delta.push((pc - if c == y { 1.0 } else { 0.0 }) * inv_n);
        }
    }
    loss *= inv_n;

    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let head = params.head();
    let mut upstream = delta;
    let mut out_dim = classes;
    let mut weights = &head.weights;
    // Walk from the head back through the encoder blocks.
    for level in (0..=params.encoder().len()).rev() {
        let input = &t.activations[level];
        let in_dim = weights.shape()[0];
        let mut gw = vec![0.0f64; in_dim * out_dim];
        let mut gb = vec![0.0f64; out_dim];
        for r in 0..n {
            let x = &input[r * in_dim..(r + 1) * in_dim];
            let d = &upstream[r * out_dim..(r + 1) * out_dim];
            for (gbj, &dj) in gb.iter_mut().zip(d) {
                *gbj += dj;
            }
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                for (g, &dj) in gw[k * out_dim..(k + 1) * out_dim].iter_mut().zip(d) {
                    *g += xk * dj;
                }
            }
        }
        grads.push((gw, gb));
        if level == 0 {
            break;
        }
        // Propagate to the previous block's output, then through its activation.
        let w = weights.data();
        let mut down = vec![0.0f64; n * in_dim];
        for r in 0..n {
            let d = &upstream[r * out_dim..(r + 1) * out_dim];
            let h = &input[r * in_dim..(r + 1) * in_dim];
            for k in 0..in_dim {
                let wk = &w[k * out_dim..(k + 1) * out_dim];
                let s: f64 = wk.iter().zip(d).map(|(&a, &b)| a as f64 * b).sum();
                down[r * in_dim + k] = s * act.derivative_from_output(h[k]);
            }
        }
        upstream = down;
        out_dim = in_dim;
        weights = &params.encoder()[level - 1].weights;
    }
    grads.reverse();

    let mut gradient = params.clone();
    let has_head_bias = params.head().bias.is_some();
    let mut targets = gradient.tensors_mut().into_iter();
    for (gw, gb) in grads.iter().take(params.encoder().len()) {
        write_f64(targets.next().unwrap(), gw);
        write_f64(targets.next().unwrap(), gb);
    }
    let (gw, gb) = grads.last().unwrap();
    write_f64(targets.next().unwrap(), gw);
    if has_head_bias {
        write_f64(targets.next().unwrap(), gb);
    }
    Ok((loss, gradient))
}

fn write_f64(target: &mut Tensor, values: &[f64]) {
    for (t, &v) in target.data_mut().iter_mut().zip(values) {
        *t = v as f32;
    }
}

/// Gradient of the mean cross-entropy over a labeled batch.
pub fn backward(params: &ParameterSet, batch: &Batch, labels: &[usize]) -> Result<ParameterSet> {
    loss_and_gradient(params, batch.features(), labels).map(|(_, g)| g)
}

/// Label-preserving perturbations used for augmentation consistency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Gaussian jitter standard deviation as a multiple of each feature's batch std.
    pub jitter: f64,
    /// Probability of zeroing each feature entry.
    pub dropout: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { jitter: 0.05, dropout: 0.1 }
    }
}

impl AugConfig {
    pub fn identity() -> Self {
        AugConfig { jitter: 0.0, dropout: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Draws `views` perturbed copies of a batch.
pub fn augment_views(batch: &Batch, views: usize, aug: &AugConfig, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    if views == 0 {
        return Err(Error::InvalidParameter("augmentation views must be at least 1".into()));
    }
    aug.validate()?;
    let x = batch.features();
    let (n, d) = (x.rows(), x.cols());
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let mean = (0..n).map(|r| x.get2(r, j) as f64).sum::<f64>() / n as f64;
            ((0..n).map(|r| (x.get2(r, j) as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(views);
    for _ in 0..views {
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            if aug.dropout > 0.0 && rng.random::<f64>() < aug.dropout {
                *v = 0.0;
            } else if aug.jitter > 0.0 {
                *v = (*v as f64 + aug.jitter * std[i % d] * unit.sample(rng)) as f32;
            }
        }
        out.push(Batch::new(Tensor::matrix(n, d, data)?)?);
    }
    Ok(out)
}

/// Fraction of (sample, view) pairs whose predicted class matches the original.
pub fn agreement_rate(original: &[usize], views: &[Vec<usize>]) -> f64 {
    let total = original.len() * views.len();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = views.iter().map(|v| v.iter().zip(original).filter(|(a, b)| a == b).count()).sum();
    hits as f64 / total as f64
}

/// Argmax agreement between a batch and pre-drawn augmented views of it.
pub fn consistency_on_views(params: &ParameterSet, batch: &Batch, views: &[Batch]) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::InvalidParameter("augmentation views must be at least 1".into()));
    }
    let original = forward(params, batch, 1.0)?.predicted_class;
    let predicted: Vec<Vec<usize>> =
        views.iter().map(|v| forward(params, v, 1.0).map(|p| p.predicted_class)).collect::<Result<_>>()?;
    Ok(agreement_rate(&original, &predicted))
}

/// Mean agreement of the predicted class under `views` augmented copies, in `[0, 1]`.
pub fn augmentation_consistency(
    params: &ParameterSet,
    batch: &Batch,
    views: usize,
    aug: &AugConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let augmented = augment_views(batch, views, aug, rng)?;
    consistency_on_views(params, batch, &augmented)
}
