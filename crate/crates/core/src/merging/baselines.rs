//! Baseline mergers: uniform mean, prediction ensemble, task arithmetic,
//! TIES and diagonal-Fisher weighting.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, Prediction};
use crate::tensor::{weighted_sum, ParameterSet, Tensor};

fn check_pool(experts: &[&ParameterSet]) -> Result<()> {
    let first = experts.first().ok_or(Error::EmptyPool)?;
    for e in &experts[1..] {
        first.check_compatible(e)?;
    }
    Ok(())
}

/// Uniform average of every parameter.
pub fn mean_merge(experts: &[&ParameterSet]) -> Result<ParameterSet> {
    check_pool(experts)?;
    let k = experts.len();
    weighted_sum(experts, &vec![1.0 / k as f64; k])
}

/// Average of the experts' tempered softmax outputs.
pub fn ensemble_predict(experts: &[&ParameterSet], batch: &Batch, tau_ent: f64) -> Result<Prediction> {
    check_pool(experts)?;
    if !(tau_ent > 0.0 && tau_ent.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {tau_ent}")));
    }
    let classes = experts[0].meta().class_count;
    let rows = batch.len();
    let mut acc = vec![0.0f64; rows * classes];
    for e in experts {
        let t = nn::trace(e, batch.features())?;
        for (r, row) in t.logits.chunks(classes).enumerate() {
            for (c, p) in nn::softmax_row(row, tau_ent).into_iter().enumerate() {
                acc[r * classes + c] += p;
            }
        }
    }
    let k = experts.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    Prediction::from_probabilities(acc, rows, classes, tau_ent)
}

fn task_vectors(experts: &[&ParameterSet], init: &ParameterSet) -> Result<Vec<Vec<f64>>> {
    check_pool(experts)?;
    init.check_compatible(experts[0])?;
    let base = init.flatten_all();
    Ok(experts
        .iter()
        .map(|e| e.flatten_all().iter().zip(&base).map(|(a, b)| *a as f64 - *b as f64).collect())
        .collect())
}

fn apply_delta(init: &ParameterSet, delta: &[f64], lambda: f64) -> Result<ParameterSet> {
    let flat: Vec<f32> = init
        .flatten_all()
        .iter()
        .zip(delta)
        .map(|(b, d)| if lambda * d == 0.0 { *b } else { (*b as f64 + lambda * d) as f32 })
        .collect();
    init.with_flat(&flat)
}

/// `init + lambda * sum_k (expert_k - init)`.
pub fn task_arithmetic_merge(experts: &[&ParameterSet], init: &ParameterSet, lambda: f64) -> Result<ParameterSet> {
    if !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda {lambda}")));
    }
    if experts.len() == 1 && lambda == 1.0 {
        init.check_compatible(experts[0])?;
        return Ok(experts[0].clone());
    }
    let tvs = task_vectors(experts, init)?;
    let sum: Vec<f64> = (0..tvs[0].len()).map(|i| tvs.iter().map(|t| t[i]).sum()).collect();
    apply_delta(init, &sum, lambda)
}

/// Keeps the `ratio` fraction of largest-magnitude entries and zeroes the rest.
fn trim(tv: &[f64], ratio: f64) -> Vec<f64> {
    let keep = ((ratio * tv.len() as f64).round() as usize).clamp(1, tv.len());
    let mut order: Vec<usize> = (0..tv.len()).collect();
    order.sort_by(|&a, &b| tv[b].abs().total_cmp(&tv[a].abs()));
    let mut out = vec![0.0; tv.len()];
    for &i in &order[..keep] {
        out[i] = tv[i];
    }
    out
}

/// Trimmed, sign-elected, disjoint mean of task vectors, scaled by `lambda`.
pub fn ties_merge(
    experts: &[&ParameterSet],
    init: &ParameterSet,
    trim_ratio: f64,
    lambda: f64,
) -> Result<ParameterSet> {
    if !(trim_ratio > 0.0 && trim_ratio <= 1.0) {
        return Err(Error::Config(format!("trim ratio {trim_ratio} not in (0, 1]")));
    }
    let trimmed: Vec<Vec<f64>> = task_vectors(experts, init)?.iter().map(|t| trim(t, trim_ratio)).collect();
    let merged = ties_combine(&trimmed);
    apply_delta(init, &merged, lambda)
}

/// Sign election plus disjoint mean over already-trimmed task vectors.
pub(crate) fn ties_combine(trimmed: &[Vec<f64>]) -> Vec<f64> {
    (0..trimmed[0].len())
        .map(|i| {
            let total: f64 = trimmed.iter().map(|t| t[i]).sum();
            if total == 0.0 {
                return 0.0;
            }
            let agreeing: Vec<f64> =
                trimmed.iter().map(|t| t[i]).filter(|v| *v != 0.0 && v.signum() == total.signum()).collect();
            if agreeing.is_empty() {
                0.0
            } else {
                agreeing.iter().sum::<f64>() / agreeing.len() as f64
            }
        })
        .collect()
}

/// Labeled samples from an expert's own source domain.
#[derive(Debug, Clone)]
pub struct FisherSamples {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Diagonal empirical Fisher: mean squared per-sample log-likelihood gradient,
/// in canonical flatten order.
pub fn fisher_diagonal(params: &ParameterSet, samples: &FisherSamples) -> Result<Vec<f64>> {
    let n = samples.labels.len();
    if n == 0 {
        return Err(Error::Config("Fisher estimation needs at least one sample".into()));
    }
    let d = samples.features.cols();
    let mut acc = vec![0.0f64; params.parameter_count()];
    for (r, &y) in samples.labels.iter().enumerate() {
        let x = Tensor::matrix(1, d, samples.features.row(r).to_vec())?;
        let (_, g) = nn::loss_and_gradient(params, &x, &[y])?;
        for (a, v) in acc.iter_mut().zip(g.flatten_all()) {
            *a += (v as f64) * (v as f64);
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    Ok(acc)
}

/// `sum_k F_k theta_k / sum_k F_k` per coordinate.
pub fn fisher_weighted_average(experts: &[&ParameterSet], fishers: &[Vec<f64>]) -> Result<ParameterSet> {
    check_pool(experts)?;
    if fishers.len() != experts.len() || fishers.iter().any(|f| f.len() != experts[0].parameter_count()) {
        return Err(Error::Shape("one Fisher diagonal per expert, one entry per parameter".into()));
    }
    if fishers.iter().flatten().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::InvalidWeights("Fisher weights must be positive".into()));
    }
    let flats: Vec<Vec<f32>> = experts.iter().map(|e| e.flatten_all()).collect();
    let merged: Vec<f32> = (0..flats[0].len())
        .map(|i| {
            let num: f64 = flats.iter().zip(fishers).map(|(t, f)| f[i] * t[i] as f64).sum();
            let den: f64 = fishers.iter().map(|f| f[i]).sum();
            (num / den) as f32
        })
        .collect();
    experts[0].with_flat(&merged)
}

/// Fisher merging: per-expert diagonal Fisher scaled to unit mean, floored
/// at `min_weight`, then used as per-coordinate weights.
pub fn fisher_merge(experts: &[&ParameterSet], samples: &[FisherSamples], min_weight: f64) -> Result<ParameterSet> {
    check_pool(experts)?;
    if samples.len() != experts.len() {
        return Err(Error::Config(format!("{} sample sets for {} experts", samples.len(), experts.len())));
    }
    if !(min_weight > 0.0) {
        return Err(Error::Config(format!("minimum Fisher weight must be positive, got {min_weight}")));
    }
    let fishers = experts
        .iter()
        .zip(samples)
        .map(|(e, s)| {
            let mut f = fisher_diagonal(e, s)?;
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            if mean > 0.0 {
                f.iter_mut().for_each(|v| *v /= mean);
            }
            f.iter_mut().for_each(|v| *v = v.max(min_weight));
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    fisher_weighted_average(experts, &fishers)
}
