//! Forward-only entropy-adaptive merging.
//!
//! Per target batch: mean tempered-softmax entropy of each expert, inverse
//! entropy weights for the encoder, a reliability-selected head expert with
//! entropy-gap weights for the head, EMA smoothing of both vectors, then one
//! merged model predicts the batch. No gradients and no labels are used, and
//! the pool is never modified.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, MergeCoefficients};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, AugConfig, Prediction};
use crate::tensor::{weighted_sum_decoupled, ParameterSet};
use crate::training::ExpertPool;

/// Mean per-sample entropy (nats) of each expert's `softmax(z / tau_ent)` on the batch.
pub fn batch_entropy_scores(experts: &[&ParameterSet], batch: &Batch, tau_ent: f64) -> Result<Vec<f64>> {
    if experts.is_empty() {
        return Err(Error::EmptyPool);
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty target batch".into()));
    }
    experts
        .iter()
        .map(|p| {
            let h = nn::row_entropies(p, batch.features(), tau_ent)?;
            Ok(h.iter().sum::<f64>() / h.len() as f64)
        })
        .collect()
}

/// `(E_k + eps)^-1` normalized over experts.
pub fn inverse_entropy_coefficients(scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if scores.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(s) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidScore(format!("entropy score {s} must be finite and >= 0")));
    }
    let mut w: Vec<f64> = scores.iter().map(|s| 1.0 / (s + epsilon)).collect();
    normalize(&mut w);
    Ok(w)
}

/// `argmax_k (1 / E_k)(1 + C_k)`; the first maximum wins.
///
/// `scores` must already be strictly positive (shift by epsilon first).
pub fn select_head_expert(scores: &[f64], consistencies: &[f64]) -> Result<usize> {
    if scores.len() != consistencies.len() || scores.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} scores vs {} consistencies",
            scores.len(),
            consistencies.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidScore(format!("reliability needs positive entropy, got {s}")));
    }
    let reliability: Vec<f64> = scores.iter().zip(consistencies).map(|(e, c)| (1.0 + c) / e).collect();
    let mut best = 0;
    for (k, &r) in reliability.iter().enumerate() {
        if r > reliability[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Softmax of `-tau_head * |E_k - E_{k*}|` over experts.
pub fn head_coefficients(scores: &[f64], k_star: usize, tau_head: f64) -> Result<Vec<f64>> {
    if !(tau_head > 0.0) {
        return Err(Error::InvalidParameter(format!("tau_head must be positive, got {tau_head}")));
    }
    let anchor =
        *scores.get(k_star).ok_or_else(|| Error::InvalidParameter(format!("head expert {k_star} out of range")))?;
    // exponent is <= 0 with equality at k*, so the max-shift is already applied
    let mut w: Vec<f64> = scores.iter().map(|e| (-tau_head * (e - anchor).abs()).exp()).collect();
    normalize(&mut w);
    Ok(w)
}

/// `mu * previous + (1 - mu) * raw` for both vectors, renormalized.
pub fn ema_update(previous: &MergeCoefficients, raw: &MergeCoefficients, mu: f64) -> Result<MergeCoefficients> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidParameter(format!("ema rate {mu} not in [0, 1)")));
    }
    let blend = |p: &[f64], r: &[f64]| -> Result<Vec<f64>> {
        if p.len() != r.len() {
            return Err(Error::InvalidParameter("coefficient vectors differ in length".into()));
        }
        if mu == 0.0 {
            return Ok(r.to_vec());
        }
        let mut out: Vec<f64> = p.iter().zip(r).map(|(a, b)| mu * a + (1.0 - mu) * b).collect();
        normalize(&mut out);
        Ok(out)
    };
    Ok(MergeCoefficients {
        encoder: blend(&previous.encoder, &raw.encoder)?,
        head: blend(&previous.head, &raw.head)?,
        timestamp: raw.timestamp,
    })
}

/// Which coefficient vectors the EMA smooths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaScope {
    #[default]
    Both,
    HeadOnly,
}

/// Encoder coefficient rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRule {
    /// Inverse-entropy weights.
    #[default]
    Entropy,
    /// Fixed uniform weights (ablation).
    Uniform,
}

/// Head coefficient rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRule {
    /// Reliability-selected expert plus entropy-gap weights.
    #[default]
    EntropyGap,
    /// Same vector as the encoder.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub epsilon: f64,
    pub tau_ent: f64,
    pub tau_head: f64,
    pub ema_rate: f64,
    /// Augmented views per batch for the consistency term.
    pub views: usize,
    pub augmentation: AugConfig,
    pub ema_scope: EmaScope,
    pub encoder_rule: EncoderRule,
    pub head_rule: HeadRule,
    /// Seeds the augmentation draws.
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            epsilon: 1e-6,
            tau_ent: 1.0,
            tau_head: 10.0,
            ema_rate: 0.3,
            views: 4,
            augmentation: AugConfig::default(),
            ema_scope: EmaScope::Both,
            encoder_rule: EncoderRule::Entropy,
            head_rule: HeadRule::EntropyGap,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.tau_ent > 0.0) || !(self.tau_head > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("ema_rate {} not in [0, 1)", self.ema_rate));
        }
        if self.views == 0 {
            return bad("views must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything one merge step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub merged: ParameterSet,
    pub prediction: Prediction,
    /// Smoothed coefficients actually used for the merge.
    pub coefficients: MergeCoefficients,
    /// Coefficients of this batch before smoothing.
    pub raw: MergeCoefficients,
    pub scores: Vec<f64>,
    /// Empty when the head rule does not need them.
    pub consistencies: Vec<f64>,
    pub head_expert: usize,
}

/// Online merging state for one stream over a frozen pool.
#[derive(Debug, Clone)]
pub struct EngineState {
    pool: Arc<ExpertPool>,
    config: EngineConfig,
    ema: MergeCoefficients,
    step: usize,
}

impl EngineState {
    pub fn new(pool: Arc<ExpertPool>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let ema = MergeCoefficients::uniform(pool.len());
        Ok(EngineState { pool, config, ema, step: 0 })
    }

    pub fn pool(&self) -> &ExpertPool {
        &self.pool
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Current smoothed coefficients (uniform before the first step).
    pub fn coefficients(&self) -> &MergeCoefficients {
        &self.ema
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Merges the pool for `batch` and predicts it.
    pub fn merge_step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let cfg = &self.config;
        let experts = self.pool.params();
        let k = experts.len();
        let t = self.step + 1;

        let scores = batch_entropy_scores(&experts, batch, cfg.tau_ent)?;
        let encoder_raw = match cfg.encoder_rule {
            EncoderRule::Entropy => inverse_entropy_coefficients(&scores, cfg.epsilon)?,
            EncoderRule::Uniform => vec![1.0 / k as f64; k],
        };

        let (head_raw, consistencies, head_expert) = match cfg.head_rule {
            HeadRule::Shared => {
                let best =
                    select_head_expert(&scores.iter().map(|e| e + cfg.epsilon).collect::<Vec<_>>(), &vec![0.0; k])?;
                (encoder_raw.clone(), Vec::new(), best)
            }
            HeadRule::EntropyGap => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let views = nn::augment_views(batch, cfg.views, &cfg.augmentation, &mut rng)?;
                let consistencies =
                    experts.iter().map(|p| nn::consistency_on_views(p, batch, &views)).collect::<Result<Vec<f64>>>()?;
                let shifted: Vec<f64> = scores.iter().map(|e| e + cfg.epsilon).collect();
                let k_star = select_head_expert(&shifted, &consistencies)?;
                (head_coefficients(&scores, k_star, cfg.tau_head)?, consistencies, k_star)
            }
        };

        let raw = MergeCoefficients { encoder: encoder_raw, head: head_raw, timestamp: t };
        let smoothed = ema_update(&self.ema, &raw, cfg.ema_rate)?;
        let coefficients = match cfg.ema_scope {
            EmaScope::Both => smoothed,
            EmaScope::HeadOnly => MergeCoefficients { encoder: raw.encoder.clone(), ..smoothed },
        };

        let merged = weighted_sum_decoupled(&experts, &coefficients.encoder, &coefficients.head)?;
        let prediction = nn::forward(&merged, batch, 1.0)?;

        self.ema = coefficients.clone();
        self.step = t;
        Ok(StepOutput { merged, prediction, coefficients, raw, scores, consistencies, head_expert })
    }
}
