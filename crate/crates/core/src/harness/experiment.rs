use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::data::{gen_domains, gen_reference_domain, load_csv, make_stream, CsvSchema, DomainDataset, StreamPlan};
use crate::error::{Error, Result};
use crate::merging::{
    ensemble_predict, fisher_merge, mean_merge, task_arithmetic_merge, ties_merge, EngineConfig, EngineState,
    FisherSamples, MergeCoefficients,
};
use crate::nn;
use crate::tensor::ParameterSet;
use crate::training::{build_pool, build_pool_from, pretrain, ExpertPool, HyperConfig};

/// Stable sub-seed for one purpose of one run.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = crc32fast::Hasher::new();
    h.update(tag.as_bytes());
    let mut z = seed.wrapping_add((h.finalize() as u64) << 32).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domains for one seed: synthetic ones regenerate per seed, CSV ones are fixed.
pub fn load_domains(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<DomainDataset>> {
    let d = &cfg.data;
    if d.csv_files.is_empty() {
        return gen_domains(derive_seed(seed, "data", 0), d.num_domains, d.classes, d.input_dim, &d.shift);
    }
    let domains = d
        .csv_files
        .iter()
        .map(|p| load_csv(p, &CsvSchema { domain_id: None, ..d.csv_schema.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let (w, c) = (domains[0].input_dim(), domains[0].class_count());
    if domains.iter().any(|x| x.input_dim() != w || x.class_count() != c) {
        return Err(Error::Config("CSV domains disagree on feature width or class count".into()));
    }
    Ok(domains)
}

/// Domains of one seed plus an expert for every domain, all from one shared init.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub domains: Vec<DomainDataset>,
    pub pool: ExpertPool,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let domains = load_domains(cfg, seed)?;
    let sweep = cfg.sweep.expand(derive_seed(seed, "sweep", 0));
    let init_seed = derive_seed(seed, "init", 0);
    let pool = if cfg.pretrain.enabled {
        let d = &cfg.data;
        let reference =
            gen_reference_domain(derive_seed(seed, "data", 0), d.classes, d.input_dim, cfg.pretrain.samples, &d.shift)?;
        let p = &cfg.pretrain;
        let hyper = HyperConfig {
            learning_rate: p.learning_rate,
            epochs: p.epochs,
            seed: derive_seed(seed, "pretrain", 0),
            ..sweep[0].clone()
        };
        let init = pretrain(&hyper.model_spec(d.input_dim, d.classes), &reference, &hyper, init_seed)?;
        build_pool_from(init, &domains, &sweep)?
    } else {
        build_pool(&domains, init_seed, &sweep)?
    };
    Ok(SeedArtifacts { seed, domains, pool })
}

/// The pool without the held-out domain's expert.
pub fn leave_out(full: &ExpertPool, held_out: usize) -> Result<ExpertPool> {
    let experts = full.experts.iter().enumerate().filter(|(i, _)| *i != held_out).map(|(_, e)| e.clone()).collect();
    ExpertPool::new(experts, full.shared_init.clone())
}

/// Outcome of one method on one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub batch_accuracies: Vec<f64>,
    /// Per-step coefficients; uniform rows for static merges, empty for
    /// output-space methods.
    pub coefficients: Vec<MergeCoefficients>,
    /// Gradient evaluations performed while the stream was processed.
    pub backward_calls: u64,
}

impl MethodRun {
    pub fn mean_accuracy(&self) -> f64 {
        self.batch_accuracies.iter().sum::<f64>() / self.batch_accuracies.len().max(1) as f64
    }
}

fn fisher_samples(domain: &DomainDataset, n: usize, seed: u64) -> Result<FisherSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = domain.train_indices();
    let idx: Vec<usize> = train.choose_multiple(&mut rng, n.min(train.len())).copied().collect();
    let (features, labels) = domain.subset(&idx)?;
    Ok(FisherSamples { features, labels })
}

fn static_merge(
    method: Method,
    pool: &ExpertPool,
    sources: &[&DomainDataset],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ParameterSet> {
    let experts = pool.params();
    let b = &cfg.baselines;
    match method {
        Method::Mean => mean_merge(&experts),
        Method::TaskArithmetic => task_arithmetic_merge(&experts, &pool.shared_init, b.task_arithmetic_lambda),
        Method::Ties => ties_merge(&experts, &pool.shared_init, b.ties_trim, b.ties_lambda),
        Method::Fisher => {
            if sources.len() != experts.len() {
                return Err(Error::Config("Fisher merging needs each expert's source domain".into()));
            }
            let samples = sources
                .iter()
                .enumerate()
                .map(|(k, d)| fisher_samples(d, b.fisher_samples, derive_seed(seed, "fisher", k as u64)))
                .collect::<Result<Vec<_>>>()?;
            fisher_merge(&experts, &samples, b.fisher_min_weight)
        }
        Method::SingleExpert(k) => experts
            .get(k)
            .map(|p| (*p).clone())
            .ok_or_else(|| Error::Config(format!("{method}: pool has {} experts", experts.len()))),
        _ => unreachable!("not a static merge"),
    }
}

/// Runs `method` over `stream`. Only the label-free [`crate::data::Batch`]
/// reaches the method; labels score the prediction afterwards.
pub fn evaluate_method(
    method: Method,
    pool: &Arc<ExpertPool>,
    sources: &[&DomainDataset],
    stream: &StreamPlan,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<MethodRun> {
    let k = pool.len();
    let mut batch_accuracies = Vec::with_capacity(stream.batches.len());
    let mut coefficients = Vec::new();
    let backward_calls;
    if let Some((encoder_rule, head_rule)) = method.engine_rules() {
        let engine_cfg = EngineConfig {
            encoder_rule,
            head_rule,
            seed: derive_seed(seed, "engine", cfg.engine.seed),
            ..cfg.engine.clone()
        };
        let mut engine = EngineState::new(Arc::clone(pool), engine_cfg)?;
        let before = nn::backward_call_count();
        for lb in &stream.batches {
            let out = engine.merge_step(lb.batch())?;
            batch_accuracies.push(out.prediction.accuracy(lb.labels()));
            coefficients.push(out.coefficients);
        }
        backward_calls = nn::backward_call_count() - before;
    } else if method == Method::Ensemble {
        let experts = pool.params();
        let before = nn::backward_call_count();
        for lb in &stream.batches {
            let pred = ensemble_predict(&experts, lb.batch(), cfg.engine.tau_ent)?;
            batch_accuracies.push(pred.accuracy(lb.labels()));
        }
        backward_calls = nn::backward_call_count() - before;
    } else {
        let merged = static_merge(method, pool, sources, cfg, seed)?;
        let fixed = match method {
            Method::SingleExpert(j) => {
                let mut w = vec![0.0; k];
                w[j] = 1.0;
                MergeCoefficients { encoder: w.clone(), head: w, timestamp: 0 }
            }
            _ => MergeCoefficients::uniform(k),
        };
        let before = nn::backward_call_count();
        for (t, lb) in stream.batches.iter().enumerate() {
            let pred = nn::forward(&merged, lb.batch(), 1.0)?;
            batch_accuracies.push(pred.accuracy(lb.labels()));
            coefficients.push(MergeCoefficients { timestamp: t + 1, ..fixed.clone() });
        }
        backward_calls = nn::backward_call_count() - before;
    }
    Ok(MethodRun { batch_accuracies, coefficients, backward_calls })
}

/// One (held-out domain, method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub domain: String,
    pub method: Method,
    pub seed: u64,
    pub experts: Vec<String>,
    pub mean_accuracy: f64,
    pub batch_accuracies: Vec<f64>,
    pub coefficients: Vec<MergeCoefficients>,
    pub backward_calls: u64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stream: String,
    pub num_batches: usize,
    pub batch_size: usize,
    /// Ordered by seed, held-out domain, then configured method order.
    pub cells: Vec<CellResult>,
}

/// Mean and spread of one method's cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    /// Mean over every scored batch.
    pub mean_accuracy: f64,
    /// Sample standard deviation of the per-cell means.
    pub std_accuracy: f64,
    pub cells: usize,
}

impl RunReport {
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.method) {
                out.push(c.method);
            }
        }
        out
    }

    pub fn aggregate(&self) -> Vec<Aggregate> {
        self.methods()
            .into_iter()
            .map(|m| {
                let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.method == m).collect();
                let rows: Vec<f64> = cells.iter().flat_map(|c| c.batch_accuracies.iter().copied()).collect();
                let means: Vec<f64> = cells.iter().map(|c| c.mean_accuracy).collect();
                let mu = means.iter().sum::<f64>() / means.len() as f64;
                let var = if means.len() > 1 {
                    means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64
                } else {
                    0.0
                };
                Aggregate {
                    method: m,
                    mean_accuracy: rows.iter().sum::<f64>() / rows.len().max(1) as f64,
                    std_accuracy: var.sqrt(),
                    cells: cells.len(),
                }
            })
            .collect()
    }

    /// Mean accuracy of `method` for `seed`, averaged over held-out domains.
    pub fn seed_mean(&self, method: Method, seed: u64) -> Option<f64> {
        let v: Vec<f64> =
            self.cells.iter().filter(|c| c.method == method && c.seed == seed).map(|c| c.mean_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Leave-one-domain-out evaluation of every configured method for every seed.
pub fn run_leave_one_out(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let prepared = cfg.seeds.par_iter().map(|&s| prepare_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    run_prepared(cfg, &prepared)
}

/// Same as [`run_leave_one_out`] over already-trained seeds.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &[SeedArtifacts]) -> Result<RunReport> {
    struct Target {
        seed: u64,
        held_out: usize,
        pool: Arc<ExpertPool>,
        stream: StreamPlan,
    }
    let mut targets = Vec::new();
    for art in prepared {
        for h in 0..art.domains.len() {
            let stream = make_stream(
                &art.domains[h],
                cfg.stream.kind,
                cfg.stream.batch_size,
                cfg.stream.num_batches,
                derive_seed(art.seed, "stream", h as u64),
            )?;
            targets.push(Target { seed: art.seed, held_out: h, pool: Arc::new(leave_out(&art.pool, h)?), stream });
        }
    }
    let jobs: Vec<(usize, Method)> =
        (0..targets.len()).flat_map(|t| cfg.methods.iter().map(move |&m| (t, m))).collect();
    let cells = jobs
        .par_iter()
        .map(|&(t, method)| {
            let target = &targets[t];
            let art = prepared.iter().find(|a| a.seed == target.seed).expect("target from a prepared seed");
            let sources: Vec<&DomainDataset> =
                art.domains.iter().enumerate().filter(|(i, _)| *i != target.held_out).map(|(_, d)| d).collect();
            let cell_seed = derive_seed(target.seed, "cell", target.held_out as u64);
            let start = Instant::now();
            let run = evaluate_method(method, &target.pool, &sources, &target.stream, cfg, cell_seed)?;
            Ok(CellResult {
                domain: art.domains[target.held_out].domain_id.clone(),
                method,
                seed: target.seed,
                experts: target.pool.experts.iter().map(|e| e.domain_id.clone()).collect(),
                mean_accuracy: run.mean_accuracy(),
                batch_accuracies: run.batch_accuracies,
                coefficients: run.coefficients,
                backward_calls: run.backward_calls,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        stream: cfg.stream.kind.to_string(),
        num_batches: cfg.stream.num_batches,
        batch_size: cfg.stream.batch_size,
        cells,
    })
}
