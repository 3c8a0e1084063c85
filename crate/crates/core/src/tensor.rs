//! Dense `f32` tensors and the named parameter container shared by every
//! other module.
//!
//! Storage is row-major `f32`. Reductions (`dot`, `norm`, weighted sums) are
//! accumulated in `f64` and rounded once at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Tolerance on the simplex constraint of merge weights.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {expected} entries, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Caller guarantees the shape/data invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (the leading dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor; 1 for vectors.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }
}

fn check_same_len(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("length {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub(crate) fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Euclidean inner product, accumulated in `f64`.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(dot_slices(a.data(), b.data()))
}

pub fn norm(a: &Tensor) -> f64 {
    dot_slices(a.data(), a.data()).sqrt()
}

pub(crate) fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    let aa = dot_slices(a, a);
    let bb = dot_slices(b, b);
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::DegenerateVector("cosine of a zero-norm vector".into()));
    }
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): exact 1.0 for identical inputs.
    Ok((dot_slices(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_len(a, b)?;
    cosine_slices(a.data(), b.data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `d x C`; logits are `features . weights + bias`.
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub depth: usize,
    pub activation: Activation,
}

/// Addresses one layer of a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerSelector {
    Named(String),
    Head,
}

impl LayerSelector {
    pub fn label(&self) -> &str {
        match self {
            LayerSelector::Named(n) => n,
            LayerSelector::Head => "head",
        }
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == "head" { LayerSelector::Head } else { LayerSelector::Named(s.to_string()) })
    }
}

/// Parameters of one classifier: ordered encoder blocks plus a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub(crate) encoder: Vec<Layer>,
    pub(crate) head: Head,
    pub(crate) meta: ModelMeta,
}

impl ParameterSet {
    pub fn new(encoder: Vec<Layer>, head: Head, activation: Activation) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Shape("at least one encoder block is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        let input_dim = encoder[0].weights.shape()[0];
        let mut width = input_dim;
        for layer in &encoder {
            if layer.name == "head" || !names.insert(layer.name.as_str()) {
                return Err(Error::Shape(format!("duplicate or reserved layer name {:?}", layer.name)));
            }
            let ws = layer.weights.shape();
            if ws.len() != 2 || ws[0] != width {
                return Err(Error::Shape(format!("layer {} weights {:?} do not take width {width}", layer.name, ws)));
            }
            if layer.bias.shape() != [ws[1]] {
                return Err(Error::Shape(format!("layer {} bias shape {:?}", layer.name, layer.bias.shape())));
            }
            width = ws[1];
        }
        let hs = head.weights.shape();
        if hs.len() != 2 || hs[0] != width {
            return Err(Error::Shape(format!("head weights {hs:?} must be ({width}, C)")));
        }
        let class_count = hs[1];
        if let Some(b) = &head.bias {
            if b.shape() != [class_count] {
                return Err(Error::Shape(format!("head bias shape {:?}", b.shape())));
            }
        }
        let meta = ModelMeta { input_dim, feature_dim: width, class_count, depth: encoder.len(), activation };
        Ok(ParameterSet { encoder, head, meta })
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn activation(&self) -> Activation {
        self.meta.activation
    }

    /// Encoder blocks in order, then the head.
    pub fn selectors(&self) -> Vec<LayerSelector> {
        self.encoder
            .iter()
            .map(|l| LayerSelector::Named(l.name.clone()))
            .chain(std::iter::once(LayerSelector::Head))
            .collect()
    }

    /// All tensors in canonical order: each encoder block's weights then
    /// bias, then head weights and head bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.encoder.len() + 2);
        for l in &self.encoder {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.head.weights);
        if let Some(b) = &self.head.bias {
            out.push(b);
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.encoder.len() + 2);
        for l in &mut self.encoder {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weights);
        if let Some(b) = &mut self.head.bias {
            out.push(b);
        }
        out
    }

    /// Number of tensors that belong to the encoder in [`Self::tensors`] order.
    pub(crate) fn encoder_tensor_count(&self) -> usize {
        2 * self.encoder.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_shape_compatible(&self, other: &ParameterSet) -> bool {
        self.meta == other.meta
            && self.head.bias.is_some() == other.head.bias.is_some()
            && self.encoder.len() == other.encoder.len()
            && self.encoder.iter().zip(&other.encoder).all(|(a, b)| {
                a.name == b.name && a.weights.shape() == b.weights.shape() && a.bias.shape() == b.bias.shape()
            })
            && self.head.weights.shape() == other.head.weights.shape()
    }

    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.is_shape_compatible(other) {
            Ok(())
        } else {
            Err(Error::IncompatibleModels("layer names, order, shapes or activation differ".into()))
        }
    }

    /// Weights (row-major) followed by bias of the selected layer.
    pub fn flatten_layer(&self, selector: &LayerSelector) -> Result<Tensor> {
        let (w, b) = match selector {
            LayerSelector::Head => (&self.head.weights, self.head.bias.as_ref()),
            LayerSelector::Named(name) => {
                let layer = self
                    .encoder
                    .iter()
                    .find(|l| &l.name == name)
                    .ok_or_else(|| Error::NotFound(format!("layer {name:?}")))?;
                (&layer.weights, Some(&layer.bias))
            }
        };
        let mut data = w.data().to_vec();
        if let Some(b) = b {
            data.extend_from_slice(b.data());
        }
        Ok(Tensor::from_parts(vec![data.len()], data))
    }

    /// Every parameter in canonical order as one vector.
    pub fn flatten_all(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Copy of `self` with parameters replaced from a canonical-order vector.
    pub fn with_flat(&self, flat: &[f32]) -> Result<ParameterSet> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite entry at flat index {pos}")));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// CRC32 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

fn check_simplex(weights: &[f64], expected_len: usize) -> Result<()> {
    if weights.len() != expected_len {
        return Err(Error::InvalidWeights(format!("{} weights for {expected_len} models", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or non-finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn combine_into(out: &mut [f32], sources: &[&[f32]], weights: &[f64]) {
    for (i, slot) in out.iter_mut().enumerate() {
        // Zero-weight terms are skipped so a one-hot combination copies bits exactly.
        let mut acc: Option<f64> = None;
        for (src, &w) in sources.iter().zip(weights) {
            if w != 0.0 {
                let term = w * src[i] as f64;
                acc = Some(acc.map_or(term, |a| a + term));
            }
        }
        *slot = acc.unwrap_or(0.0) as f32;
    }
}

/// Convex combination with separate weights for encoder and head tensors.
pub fn weighted_sum_decoupled(
    models: &[&ParameterSet],
    encoder_weights: &[f64],
    head_weights: &[f64],
) -> Result<ParameterSet> {
    let first = *models.first().ok_or_else(|| Error::IncompatibleModels("no models to combine".into()))?;
    for m in &models[1..] {
        first.check_compatible(m)?;
    }
    check_simplex(encoder_weights, models.len())?;
    check_simplex(head_weights, models.len())?;

    let mut out = first.clone();
    let encoder_tensors = first.encoder_tensor_count();
    let per_model: Vec<Vec<&Tensor>> = models.iter().map(|m| m.tensors()).collect();
    for (ti, target) in out.tensors_mut().into_iter().enumerate() {
        let sources: Vec<&[f32]> = per_model.iter().map(|ts| ts[ti].data()).collect();
        let weights = if ti < encoder_tensors { encoder_weights } else { head_weights };
        combine_into(target.data_mut(), &sources, weights);
    }
    Ok(out)
}

/// Entrywise convex combination `sum_k w_k * model_k`.
pub fn weighted_sum(models: &[&ParameterSet], weights: &[f64]) -> Result<ParameterSet> {
    weighted_sum_decoupled(models, weights, weights)
}
