//! Synthetic multi-domain data, CSV ingestion and target stream construction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unlabeled feature rows: the only thing merging methods ever see.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Tensor,
}

impl Batch {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape(format!("batch must be 2-D, got {:?}", features.shape())));
        }
        Ok(Batch { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// A batch plus its labels. Labels are only read by scorers, after prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    batch: Batch,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(batch: Batch, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != batch.len() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), batch.len())));
        }
        Ok(LabeledBatch { batch, labels })
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Labeled samples of one source domain with a train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    train_indices: Vec<usize>,
    val_indices: Vec<usize>,
}

impl DomainDataset {
    /// Builds a dataset with a seeded random split holding out `val_fraction`.
    pub fn new(
        domain_id: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        val_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction {val_fraction} not in [0, 1)")));
        }
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let mut val = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Self::with_split(domain_id, features, labels, class_count, train, val)
    }

    pub fn with_split(
        domain_id: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        train_indices: Vec<usize>,
        val_indices: Vec<usize>,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape(format!("features {:?} vs {} labels", features.shape(), labels.len())));
        }
        if class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Label { label: y as i64, classes: class_count });
        }
        let mut seen = vec![false; labels.len()];
        for &i in train_indices.iter().chain(&val_indices) {
            if i >= seen.len() || seen[i] {
                return Err(Error::Config("train/val split must be disjoint and in range".into()));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("train/val split must cover every sample".into()));
        }
        Ok(DomainDataset { domain_id: domain_id.into(), features, labels, class_count, train_indices, val_indices })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_indices
    }

    /// Rows and labels at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::matrix(indices.len(), d, data)?, labels))
    }

    pub fn train_set(&self) -> Result<(Tensor, Vec<usize>)> {
        self.subset(&self.train_indices)
    }

    pub fn val_set(&self) -> Result<(Tensor, Vec<usize>)> {
        self.subset(&self.val_indices)
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

/// How per-domain covariate and prior shifts are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    /// Each domain rotates by an angle drawn uniformly from `[0, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    /// Per-feature scales drawn log-uniformly from `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    pub offset_std: f64,
    /// Class priors drawn from `Dirichlet(c * 1)`; `None` keeps them uniform.
    pub prior_concentration: Option<f64>,
    /// Standard deviation of the shared class-mean coordinates.
    pub class_separation: f64,
    pub noise_std: f64,
    pub samples_per_domain: usize,
    pub val_fraction: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            max_rotation_deg: 60.0,
            scale_min: 0.5,
            scale_max: 2.0,
            offset_std: 0.5,
            prior_concentration: Some(0.3),
            class_separation: 1.0,
            noise_std: 1.0,
            samples_per_domain: 2000,
            val_fraction: 0.2,
        }
    }
}

impl ShiftConfig {
    /// No shift at all: every domain is drawn from the same distribution.
    pub fn identity() -> Self {
        ShiftConfig {
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            offset_std: 0.0,
            prior_concentration: None,
            ..ShiftConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be positive (zero variance is degenerate)");
        }
        if !(self.class_separation > 0.0) {
            return bad("class_separation must be positive");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("need 0 < scale_min <= scale_max");
        }
        if !(self.offset_std >= 0.0) || !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return bad("offset_std must be >= 0 and max_rotation_deg in [0, 180]");
        }
        if matches!(self.prior_concentration, Some(c) if !(c > 0.0)) {
            return bad("prior_concentration must be positive");
        }
        if self.samples_per_domain == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("samples_per_domain must be positive and val_fraction in [0, 1)");
        }
        Ok(())
    }
}

/// Class structure shared by all domains: one Gaussian cluster per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGeometry {
    pub means: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl ClassGeometry {
    pub fn random(rng: &mut impl Rng, classes: usize, dim: usize, separation: f64, noise_std: f64) -> Self {
        let dist = Normal::new(0.0, separation).expect("positive separation");
        let means = (0..classes).map(|_| (0..dim).map(|_| dist.sample(rng)).collect()).collect();
        ClassGeometry { means, noise_std }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }
}

/// Concrete shift applied to one domain: `x = R diag(s) z + o`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub rotation_deg: f64,
    /// Orthonormal basis (row-major `d x d`); the rotation turns every
    /// consecutive basis pair by `rotation_deg`.
    pub basis: Vec<f64>,
    pub scales: Vec<f64>,
    pub offset: Vec<f64>,
    pub class_prior: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize, classes: usize) -> Self {
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        DomainShift {
            rotation_deg: 0.0,
            basis,
            scales: vec![1.0; dim],
            offset: vec![0.0; dim],
            class_prior: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn random(rng: &mut impl Rng, dim: usize, classes: usize, cfg: &ShiftConfig) -> Self {
        let rotation_deg = rng.random::<f64>() * cfg.max_rotation_deg;
        let basis = random_orthonormal(rng, dim);
        let (lo, hi) = (cfg.scale_min.ln(), cfg.scale_max.ln());
        let scales = (0..dim).map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp()).collect();
        let offset = if cfg.offset_std > 0.0 {
            let n = Normal::new(0.0, cfg.offset_std).expect("finite std");
            (0..dim).map(|_| n.sample(rng)).collect()
        } else {
            vec![0.0; dim]
        };
        let class_prior = match cfg.prior_concentration {
            Some(c) => sample_dirichlet(rng, &vec![c; classes]),
            None => vec![1.0 / classes as f64; classes],
        };
        DomainShift { rotation_deg, basis, scales, offset, class_prior }
    }

    /// Applies `R diag(s)` then the offset to one point.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let scaled: Vec<f64> = z.iter().zip(&self.scales).map(|(a, s)| a * s).collect();
        // coordinates in the rotation basis
        let mut coords: Vec<f64> = (0..d).map(|i| (0..d).map(|j| self.basis[i * d + j] * scaled[j]).sum()).collect();
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        for pair in coords.chunks_mut(2) {
            if let [a, b] = pair {
                let (x, y) = (*a, *b);
                *a = cos * x - sin * y;
                *b = sin * x + cos * y;
            }
        }
        (0..d).map(|j| (0..d).map(|i| self.basis[i * d + j] * coords[i]).sum::<f64>() + self.offset[j]).collect()
    }
}

fn random_orthonormal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if len > 1e-8 {
            rows.push(v.into_iter().map(|a| a / len).collect());
        }
    }
    rows.concat()
}

/// Dirichlet sample via log-space Gamma draws; stable for concentrations far below 1.
pub fn sample_dirichlet(rng: &mut impl Rng, alpha: &[f64]) -> Vec<f64> {
    // For a < 1: G(a) = G(a + 1) * U^(1/a), so ln G = ln G(a + 1) + ln(U) / a.
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / a
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Draws `n` labeled samples of one domain.
pub fn sample_domain(
    domain_id: impl Into<String>,
    geometry: &ClassGeometry,
    shift: &DomainShift,
    n: usize,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> Result<DomainDataset> {
    let d = geometry.dim();
    let classes = geometry.classes();
    let picker = WeightedIndex::new(&shift.class_prior).map_err(|e| Error::Config(format!("class prior: {e}")))?;
    let noise = Normal::new(0.0, geometry.noise_std).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = picker.sample(rng);
        let z: Vec<f64> = geometry.means[y].iter().map(|m| m + noise.sample(rng)).collect();
        data.extend(shift.apply(&z).into_iter().map(|v| v as f32));
        labels.push(y);
    }
    let split_seed = rng.random::<u64>();
    DomainDataset::new(domain_id, Tensor::matrix(n, d, data)?, labels, classes, val_fraction, split_seed)
}

/// Generates `num_domains` datasets sharing one class structure, each under
/// its own random rotation, scaling, offset and class prior.
pub fn gen_domains(
    base_seed: u64,
    num_domains: usize,
    classes: usize,
    dim: usize,
    cfg: &ShiftConfig,
) -> Result<Vec<DomainDataset>> {
    if num_domains < 2 || classes < 2 {
        return Err(Error::Config("need at least 2 domains and 2 classes".into()));
    }
    if dim == 0 {
        return Err(Error::Config("input dimension must be positive".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let geometry = ClassGeometry::random(&mut rng, classes, dim, cfg.class_separation, cfg.noise_std);
    (0..num_domains)
        .map(|k| {
            let shift = DomainShift::random(&mut rng, dim, classes, cfg);
            sample_domain(format!("domain{k}"), &geometry, &shift, cfg.samples_per_domain, cfg.val_fraction, &mut rng)
        })
        .collect()
}

/// Unshifted domain over the same class structure as [`gen_domains`] with
/// the same `base_seed`, drawn from an independent random stream.
pub fn gen_reference_domain(
    base_seed: u64,
    classes: usize,
    dim: usize,
    samples: usize,
    cfg: &ShiftConfig,
) -> Result<DomainDataset> {
    if classes < 2 || dim == 0 || samples == 0 {
        return Err(Error::Config("reference domain needs 2+ classes, positive dimension and samples".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let geometry = ClassGeometry::random(&mut rng, classes, dim, cfg.class_separation, cfg.noise_std);
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0x5E_ED0F_2EF0_u64);
    sample_domain("reference", &geometry, &DomainShift::identity(dim, classes), samples, cfg.val_fraction, &mut rng)
}

/// Kind of target stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamKind {
    Iid,
    /// Per-batch class proportions from `Dirichlet(alpha * 1)`.
    Dirichlet(f64),
    /// Sticky Markov chain over the dominant class with the given stay probability.
    Temporal(f64),
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamKind::Iid => f.write_str("iid"),
            StreamKind::Dirichlet(a) => write!(f, "dirichlet:{a}"),
            StreamKind::Temporal(s) => write!(f, "temporal:{s}"),
        }
    }
}

impl FromStr for StreamKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad stream parameter in {s:?}")));
        match s.split_once(':') {
            None if s == "iid" => Ok(StreamKind::Iid),
            Some(("dirichlet", v)) => Ok(StreamKind::Dirichlet(parse(v)?)),
            Some(("temporal", v)) => Ok(StreamKind::Temporal(parse(v)?)),
            _ => Err(Error::Config(format!("unknown stream kind {s:?}"))),
        }
    }
}

impl Serialize for StreamKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StreamKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered target batches plus the realized class proportions of each.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPlan {
    pub batches: Vec<LabeledBatch>,
    pub mixture_trace: Vec<Vec<f64>>,
    pub seed: u64,
}

struct Sampler<'a> {
    dataset: &'a DomainDataset,
    by_class: Vec<Vec<usize>>,
    available: Vec<usize>,
}

impl<'a> Sampler<'a> {
    fn new(dataset: &'a DomainDataset, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if batch_size > dataset.len() {
            return Err(Error::Config(format!("batch_size {batch_size} exceeds dataset size {}", dataset.len())));
        }
        let by_class = dataset.class_indices();
        let available = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
        Ok(Sampler { dataset, by_class, available })
    }

    /// Draws `counts[c]` samples of each class, without replacement inside
    /// the batch while the class pool lasts.
    fn draw(&self, counts: &[usize], rng: &mut impl Rng) -> Result<(LabeledBatch, Vec<f64>)> {
        let total: usize = counts.iter().sum();
        let mut idx = Vec::with_capacity(total);
        for (c, &k) in counts.iter().enumerate() {
            let pool = &self.by_class[c];
            if k == 0 {
                continue;
            }
            let take = k.min(pool.len());
            idx.extend(pool.choose_multiple(rng, take).copied());
            for _ in take..k {
                idx.push(pool[rng.random_range(0..pool.len())]);
            }
        }
        idx.shuffle(rng);
        let (x, y) = self.dataset.subset(&idx)?;
        let proportions = counts.iter().map(|&k| k as f64 / total as f64).collect();
        Ok((LabeledBatch::new(Batch::new(x)?, y)?, proportions))
    }

    fn counts_from_labels(&self, labels: impl Iterator<Item = usize>) -> Vec<usize> {
        let mut counts = vec![0; self.by_class.len()];
        for y in labels {
            counts[y] += 1;
        }
        counts
    }
}

fn finish(parts: Vec<(LabeledBatch, Vec<f64>)>, seed: u64) -> StreamPlan {
    let (batches, mixture_trace) = parts.into_iter().unzip();
    StreamPlan { batches, mixture_trace, seed }
}

/// Batches drawn uniformly from the dataset.
pub fn iid_stream(dataset: &DomainDataset, batch_size: usize, num_batches: usize, seed: u64) -> Result<StreamPlan> {
    let sampler = Sampler::new(dataset, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let parts = (0..num_batches)
        .map(|_| {
            let labels = all.choose_multiple(&mut rng, batch_size).map(|&i| dataset.labels()[i]);
            let counts = sampler.counts_from_labels(labels);
            sampler.draw(&counts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(parts, seed))
}

/// Class-skewed batches: proportions from `Dirichlet(alpha * 1)` per batch.
pub fn dirichlet_stream(
    dataset: &DomainDataset,
    alpha: f64,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<StreamPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let sampler = Sampler::new(dataset, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = (0..num_batches)
        .map(|_| {
            let pi = sample_dirichlet(&mut rng, &vec![alpha; sampler.available.len()]);
            let picker = WeightedIndex::new(&pi).map_err(|e| Error::Config(format!("dirichlet weights: {e}")))?;
            let labels: Vec<usize> = (0..batch_size).map(|_| sampler.available[picker.sample(&mut rng)]).collect();
            let counts = sampler.counts_from_labels(labels.into_iter());
            sampler.draw(&counts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(parts, seed))
}

/// Dominant class per batch from a sticky chain: stay with probability
/// `stickiness`, otherwise redraw uniformly over all `states`.
pub(crate) fn sticky_chain(states: usize, stickiness: f64, steps: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(steps);
    let mut current = rng.random_range(0..states);
    for t in 0..steps {
        if t > 0 && rng.random::<f64>() >= stickiness {
            current = rng.random_range(0..states);
        }
        out.push(current);
    }
    out
}

/// Share of each temporally correlated batch taken from the dominant class.
pub const TEMPORAL_DOMINANT_SHARE: f64 = 0.8;

/// Temporally correlated batches: 80% from a sticky dominant class, the rest uniform.
pub fn temporal_stream(
    dataset: &DomainDataset,
    stickiness: f64,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<StreamPlan> {
    if !(0.0..1.0).contains(&stickiness) {
        return Err(Error::Config(format!("stickiness must be in [0, 1), got {stickiness}")));
    }
    let sampler = Sampler::new(dataset, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = sticky_chain(sampler.available.len(), stickiness, num_batches, &mut rng);
    let n_dom = (TEMPORAL_DOMINANT_SHARE * batch_size as f64).round() as usize;
    let parts = chain
        .into_iter()
        .map(|state| {
            let dominant = sampler.available[state];
            let rest: Vec<usize> =
                (n_dom..batch_size).map(|_| sampler.available[rng.random_range(0..sampler.available.len())]).collect();
            let counts = sampler.counts_from_labels(std::iter::repeat_n(dominant, n_dom).chain(rest));
            sampler.draw(&counts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(parts, seed))
}

pub fn make_stream(
    dataset: &DomainDataset,
    kind: StreamKind,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<StreamPlan> {
    match kind {
        StreamKind::Iid => iid_stream(dataset, batch_size, num_batches, seed),
        StreamKind::Dirichlet(a) => dirichlet_stream(dataset, a, batch_size, num_batches, seed),
        StreamKind::Temporal(s) => temporal_stream(dataset, s, batch_size, num_batches, seed),
    }
}

/// How to read a CSV file into a [`DomainDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub label_column: String,
    /// Number of classes; inferred as `max label + 1` when absent.
    pub class_count: Option<usize>,
    /// Z-score each feature column.
    pub standardize: bool,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Defaults to the file stem.
    pub domain_id: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "label".into(),
            class_count: None,
            standardize: false,
            val_fraction: 0.2,
            split_seed: 0,
            domain_id: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == schema.label_column)
        .ok_or_else(|| Error::Parse { line: 1, message: format!("no column named {:?}", schema.label_column) })?;
    let width = headers.len() - 1;
    if width == 0 {
        return Err(Error::Parse { line: 1, message: "no feature columns".into() });
    }
    let mut data = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                let y = field
                    .parse::<i64>()
                    .map_err(|_| Error::Parse { line, message: format!("label {field:?} is not an integer") })?;
                raw_labels.push(y);
            } else {
                let v = field
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, message: format!("bad number {field:?} in column {j}") })?;
                data.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no data rows", path.display())));
    }
    let inferred = raw_labels.iter().copied().max().unwrap_or(0).max(0) as usize + 1;
    let classes = schema.class_count.unwrap_or(inferred);
    let labels = raw_labels
        .into_iter()
        .map(|y| if y < 0 || y as usize >= classes { Err(Error::Label { label: y, classes }) } else { Ok(y as usize) })
        .collect::<Result<Vec<usize>>>()?;
    let n = labels.len();
    if schema.standardize {
        standardize_columns(&mut data, n, width);
    }
    let domain_id = schema
        .domain_id
        .clone()
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    DomainDataset::new(
        domain_id,
        Tensor::matrix(n, width, data)?,
        labels,
        classes,
        schema.val_fraction,
        schema.split_seed,
    )
}

fn standardize_columns(data: &mut [f32], rows: usize, cols: usize) {
    for j in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + j] as f64).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (data[r * cols + j] as f64 - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..rows {
            let v = &mut data[r * cols + j];
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// Writes `f0..f{d-1},label` with shortest round-trip float formatting.
pub fn write_csv(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let d = dataset.input_dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for (r, &y) in dataset.labels().iter().enumerate() {
        let mut rec: Vec<String> = dataset.features().row(r).iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
