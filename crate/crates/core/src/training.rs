//! Source training: a hyperparameter sweep per domain, then one expert per
//! domain picked by validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ModelSpec};
use crate::tensor::ParameterSet;

/// Scale of the shared random head initialization.
pub const HEAD_INIT_SCALE: f64 = 1e-2;

/// One point of the source-training sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Drives mini-batch order.
    pub seed: u64,
    pub activation: Activation,
    pub hidden_dims: Vec<usize>,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            learning_rate: 1e-2,
            epochs: 20,
            weight_decay: 0.0,
            seed: 0,
            activation: Activation::Relu,
            hidden_dims: vec![32, 32],
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize, class_count: usize) -> ModelSpec {
        ModelSpec { input_dim, hidden_dims: self.hidden_dims.clone(), class_count, activation: self.activation }
    }
}

/// Desk-scale DiWA-style sweep: two learning rates times `seeds_per_lr` seeds.
pub fn default_sweep(epochs: usize, hidden_dims: &[usize], seeds_per_lr: usize) -> Vec<HyperConfig> {
    let mut sweep = Vec::new();
    for (i, lr) in [1e-2, 3e-3].into_iter().enumerate() {
        for s in 0..seeds_per_lr {
            sweep.push(HyperConfig {
                learning_rate: lr,
                epochs,
                seed: (i * seeds_per_lr + s) as u64,
                hidden_dims: hidden_dims.to_vec(),
                ..HyperConfig::default()
            });
        }
    }
    sweep
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCandidate {
    pub params: ParameterSet,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

fn describe(cfg: &HyperConfig) -> String {
    format!(
        "lr={} epochs={} wd={} momentum={} seed={}",
        cfg.learning_rate, cfg.epochs, cfg.weight_decay, cfg.momentum, cfg.seed
    )
}

/// Loss and accuracy of `params` on a labeled set.
pub fn evaluate(params: &ParameterSet, features: &crate::tensor::Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let pred = nn::forward_features(params, features, 1.0)?;
    Ok((nn::cross_entropy_loss(&pred, labels)?, pred.accuracy(labels)))
}

/// Mini-batch SGD with momentum on the cross-entropy, starting from `init`.
pub fn train_candidate(init: &ParameterSet, domain: &DomainDataset, cfg: &HyperConfig) -> Result<TrainedCandidate> {
    cfg.validate()?;
    let meta = init.meta();
    if meta.input_dim != domain.input_dim() || meta.class_count != domain.class_count() {
        return Err(Error::Shape(format!(
            "model expects {} inputs / {} classes, domain {} has {} / {}",
            meta.input_dim,
            meta.class_count,
            domain.domain_id,
            domain.input_dim(),
            domain.class_count()
        )));
    }
    if domain.train_indices().is_empty() || domain.val_indices().is_empty() {
        return Err(Error::EmptyDataset(format!("domain {} needs train and val samples", domain.domain_id)));
    }

    let mut params = init.clone();
    let mut velocity: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut order = domain.train_indices().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = domain.subset(chunk)?;
            let (loss, grad) = nn::loss_and_gradient(&params, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { config: describe(cfg) });
            }
            let grads = grad.tensors();
            for ((p, g), v) in params.tensors_mut().into_iter().zip(grads).zip(velocity.iter_mut()) {
                for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi + wd * *pi;
                    *pi -= lr * *vi;
                }
            }
            if params.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { config: describe(cfg) });
            }
        }
    }
    let (vx, vy) = domain.val_set()?;
    let (val_loss, val_accuracy) = evaluate(&params, &vx, &vy).map_err(|e| match e {
        Error::InvalidParameter(_) => Error::Divergence { config: describe(cfg) },
        other => other,
    })?;
    if !val_loss.is_finite() {
        return Err(Error::Divergence { config: describe(cfg) });
    }
    Ok(TrainedCandidate { params, val_loss, val_accuracy })
}

/// Index of the minimal validation loss; ties resolve to the lowest index.
pub fn select_expert(val_losses: &[f64]) -> Result<usize> {
    if val_losses.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut best = 0;
    for (i, &l) in val_losses.iter().enumerate() {
        if l < val_losses[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub domain_id: String,
    pub params: ParameterSet,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// One selected expert per source domain, all fine-tuned from `shared_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool {
    pub experts: Vec<Expert>,
    pub shared_init: ParameterSet,
}

impl ExpertPool {
    pub fn new(experts: Vec<Expert>, shared_init: ParameterSet) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::EmptyPool);
        }
        for e in &experts {
            shared_init.check_compatible(&e.params)?;
        }
        Ok(ExpertPool { experts, shared_init })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn params(&self) -> Vec<&ParameterSet> {
        self.experts.iter().map(|e| &e.params).collect()
    }

    /// CRC32 over the init and every expert, in order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.shared_init.checksum().to_le_bytes());
        for e in &self.experts {
            h.update(e.domain_id.as_bytes());
            h.update(&e.params.checksum().to_le_bytes());
        }
        h.finalize()
    }
}

/// Trains a random init on `reference`, then puts back the untrained init
/// head, so every expert starts from the same encoder and a fresh head.
pub fn pretrain(spec: &ModelSpec, reference: &DomainDataset, cfg: &HyperConfig, seed: u64) -> Result<ParameterSet> {
    let init = shared_init(spec, seed)?;
    let mut trained = train_candidate(&init, reference, cfg)?.params;
    trained.head = init.head.clone();
    Ok(trained)
}

/// Shared random init: fan-in scaled encoder, near-zero head.
pub fn shared_init(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.init(&mut ChaCha8Rng::seed_from_u64(seed), HEAD_INIT_SCALE)
}

/// Trains every sweep point on every domain from one shared init and keeps
/// the best candidate per domain.
pub fn build_pool(domains: &[DomainDataset], init_seed: u64, sweep: &[HyperConfig]) -> Result<ExpertPool> {
    if domains.len() < 2 {
        return Err(Error::Config("need at least 2 source domains".into()));
    }
    let first = sweep.first().ok_or_else(|| Error::Config("empty hyperparameter sweep".into()))?;
    if sweep.iter().any(|h| h.hidden_dims != first.hidden_dims || h.activation != first.activation) {
        return Err(Error::Config("all sweep points must share hidden_dims and activation".into()));
    }
    let (input_dim, classes) = (domains[0].input_dim(), domains[0].class_count());
    if domains.iter().any(|d| d.input_dim() != input_dim || d.class_count() != classes) {
        return Err(Error::Config("domains disagree on input width or class count".into()));
    }
    let init = shared_init(&first.model_spec(input_dim, classes), init_seed)?;
    build_pool_from(init, domains, sweep)
}

/// Like [`build_pool`], fine-tuning every expert from the given `init`.
pub fn build_pool_from(init: ParameterSet, domains: &[DomainDataset], sweep: &[HyperConfig]) -> Result<ExpertPool> {
    if domains.len() < 2 {
        return Err(Error::Config("need at least 2 source domains".into()));
    }
    let meta = *init.meta();
    if domains.iter().any(|d| d.input_dim() != meta.input_dim || d.class_count() != meta.class_count) {
        return Err(Error::Config("domains disagree with the init on input width or class count".into()));
    }
    if sweep.is_empty() || sweep.iter().any(|h| h.hidden_dims.len() != meta.depth || h.activation != meta.activation) {
        return Err(Error::Config("sweep architecture differs from the init".into()));
    }

    let jobs: Vec<(usize, usize)> = (0..domains.len()).flat_map(|k| (0..sweep.len()).map(move |h| (k, h))).collect();
    let trained: Vec<TrainedCandidate> =
        jobs.par_iter().map(|&(k, h)| train_candidate(&init, &domains[k], &sweep[h])).collect::<Result<_>>()?;

    let mut experts = Vec::with_capacity(domains.len());
    for (k, domain) in domains.iter().enumerate() {
        let candidates = &trained[k * sweep.len()..(k + 1) * sweep.len()];
        let losses: Vec<f64> = candidates.iter().map(|c| c.val_loss).collect();
        let best = &candidates[select_expert(&losses)?];
        experts.push(Expert {
            domain_id: domain.domain_id.clone(),
            params: best.params.clone(),
            val_loss: best.val_loss,
            val_accuracy: best.val_accuracy,
        });
    }
    ExpertPool::new(experts, init)
}
