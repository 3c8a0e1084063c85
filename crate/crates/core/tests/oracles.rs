//! Statistical oracles over trained pools and synthetic domains.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use entmerge::data::{sample_domain, ClassGeometry, DomainShift, LabeledBatch};
use entmerge::harness::{prepare_seed, ExperimentConfig, SeedArtifacts};
use entmerge::merging::EngineState;
use entmerge::nn::{loss_and_gradient, Activation, ModelSpec};
use entmerge::training::{evaluate, shared_init, train_candidate, HyperConfig};
use entmerge::Tensor;

const SEEDS: u64 = 10;

fn pools() -> &'static [SeedArtifacts] {
    static POOLS: OnceLock<Vec<SeedArtifacts>> = OnceLock::new();
    POOLS.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        (0..SEEDS).into_par_iter().map(|s| prepare_seed(&cfg, s).unwrap()).collect()
    })
}

#[test]
fn rotation_monotonically_degrades_a_frozen_source_model() {
    let angles = [0.0, 20.0, 40.0, 60.0, 80.0];
    let monotone = (0..SEEDS)
        .into_par_iter()
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (classes, dim) = (7, 16);
            let geometry = ClassGeometry::random(&mut rng, classes, dim, 1.0, 1.0);
            let source =
                sample_domain("src", &geometry, &DomainShift::identity(dim, classes), 2000, 0.2, &mut rng).unwrap();
            let cfg = HyperConfig { epochs: 10, seed, ..HyperConfig::default() };
            let init = shared_init(&cfg.model_spec(dim, classes), seed).unwrap();
            let model = train_candidate(&init, &source, &cfg).unwrap().params;

            let basis = DomainShift::random(&mut rng, dim, classes, &Default::default()).basis;
            let eval_seed = rng.random::<u64>();
            let errors: Vec<f64> = angles
                .iter()
                .map(|&deg| {
                    let shift =
                        DomainShift { rotation_deg: deg, basis: basis.clone(), ..DomainShift::identity(dim, classes) };
                    // same draws at every angle, so only the rotation differs
                    let mut r = ChaCha8Rng::seed_from_u64(eval_seed);
                    let target = sample_domain("tgt", &geometry, &shift, 1000, 0.2, &mut r).unwrap();
                    1.0 - evaluate(&model, target.features(), target.labels()).unwrap().1
                })
                .collect();
            errors.windows(2).all(|w| w[1] > w[0])
        })
        .count();
    assert!(monotone as f64 >= 0.8 * SEEDS as f64, "monotone on {monotone}/{SEEDS} seeds");
}

#[test]
fn experts_beat_the_majority_class_on_their_own_domain() {
    let good = pools()
        .iter()
        .filter(|art| {
            art.pool.experts.iter().zip(&art.domains).all(|(e, d)| {
                let mut counts = vec![0usize; d.class_count()];
                for &i in d.val_indices() {
                    counts[d.labels()[i]] += 1;
                }
                let majority = *counts.iter().max().unwrap() as f64 / d.val_indices().len() as f64;
                e.val_accuracy > majority
            })
        })
        .count();
    assert!(good as f64 >= 0.9 * SEEDS as f64, "{good}/{SEEDS} seeds");
}

#[test]
fn pure_source_batches_favor_their_own_expert() {
    let cfg = ExperimentConfig::default();
    let mut hits = 0;
    let mut trials = 0;
    for art in pools() {
        let pool = Arc::new(art.pool.clone());
        for (k, domain) in art.domains.iter().enumerate() {
            let mut engine = EngineState::new(Arc::clone(&pool), cfg.engine.clone()).unwrap();
            let (x, y) = domain.val_set().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(art.seed * 31 + k as u64);
            let mut mean = vec![0.0; pool.len()];
            for _ in 0..10 {
                let rows: Vec<usize> = (0..32).map(|_| rng.random_range(0..y.len())).collect();
                let data = rows.iter().flat_map(|&r| x.row(r).to_vec()).collect();
                let lb = LabeledBatch::new(
                    entmerge::data::Batch::new(Tensor::matrix(32, x.cols(), data).unwrap()).unwrap(),
                    rows.iter().map(|&r| y[r]).collect(),
                )
                .unwrap();
                let out = engine.merge_step(lb.batch()).unwrap();
                mean.iter_mut().zip(&out.raw.encoder).for_each(|(m, a)| *m += a);
            }
            let best = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
            hits += usize::from(best == k);
            trials += 1;
        }
    }
    assert!(hits as f64 >= 0.8 * trials as f64, "own expert maximal in {hits}/{trials}");
}

#[test]
fn gradient_vanishes_after_convergence_on_separable_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 24;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 0 { -1.0 } else { 1.0 };
        data.push(sign * rng.random_range(1.0f32..2.0));
        data.push(rng.random_range(-1.0f32..1.0));
        labels.push(y);
    }
    let x = Tensor::matrix(n, 2, data).unwrap();
    let spec = ModelSpec { input_dim: 2, hidden_dims: vec![4], class_count: 2, activation: Activation::Tanh };
    let mut p = spec.init(&mut rng, 0.5).unwrap();
    let mut norm = f64::INFINITY;
    for _ in 0..50_000 {
        let (_, g) = loss_and_gradient(&p, &x, &labels).unwrap();
        let gf = g.flatten_all();
        norm = gf.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-4 {
            break;
        }
        let next: Vec<f32> = p.flatten_all().iter().zip(&gf).map(|(w, d)| w - 0.5 * d).collect();
        p = p.with_flat(&next).unwrap();
    }
    assert!(norm < 1e-4, "gradient norm {norm}");
}
