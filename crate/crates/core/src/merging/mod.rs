//! Merging rules: the online entropy-adaptive engine and the static or
//! output-space baselines it is compared against.

mod adaptive;
mod baselines;

pub use adaptive::{
    batch_entropy_scores, ema_update, head_coefficients, inverse_entropy_coefficients, select_head_expert, EmaScope,
    EncoderRule, EngineConfig, EngineState, HeadRule, StepOutput,
};
pub use baselines::{
    ensemble_predict, fisher_diagonal, fisher_merge, fisher_weighted_average, mean_merge, task_arithmetic_merge,
    ties_merge, FisherSamples,
};

use serde::{Deserialize, Serialize};

use crate::tensor::SIMPLEX_TOLERANCE;

/// Per-expert simplex weights for the encoder and the head at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    pub encoder: Vec<f64>,
    pub head: Vec<f64>,
    pub timestamp: usize,
}

impl MergeCoefficients {
    pub fn uniform(k: usize) -> Self {
        MergeCoefficients { encoder: vec![1.0 / k as f64; k], head: vec![1.0 / k as f64; k], timestamp: 0 }
    }

    pub fn is_on_simplex(&self) -> bool {
        is_on_simplex(&self.encoder) && is_on_simplex(&self.head)
    }
}

/// Nonnegative entries summing to one within [`SIMPLEX_TOLERANCE`].
pub fn is_on_simplex(w: &[f64]) -> bool {
    !w.is_empty()
        && w.iter().all(|v| v.is_finite() && *v >= 0.0)
        && (w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE
}

pub(crate) fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
}
