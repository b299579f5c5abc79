//! Sequential vs rayon execution of the two parallel hot spots: the `R`
//! simulations behind one synthetic-likelihood evaluation, and replicate
//! fan-out in a batch.
//!
//! Build with `--no-default-features` to see the sequential fallback, where
//! both policies run on one thread.

use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use synsaem::exec::Exec;
use synsaem::experiment::{run_batch, BatchOptions, ExperimentConfig, Method};
use synsaem::linalg::Vector;
use synsaem::models::theophylline::TheophyllineConstants;
use synsaem::models::{Model, TheophyllineModel};
use synsaem::rng::seeded;
use synsaem::synlik::{sl_logdensity, SlConfig, SummaryScope};

fn synthetic_likelihood(c: &mut Criterion) {
    let model = TheophyllineModel::new(TheophyllineConstants::default());
    let theta = [0.05, 0.04, 0.1, 0.319];
    let s = Vector::from_vec(model.simulate_joint_summaries(&theta, &mut seeded(1)).unwrap());
    let mut group = c.benchmark_group("sl_logdensity_theophylline");
    group.sample_size(20);
    for simulations in [200, 1000] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let cfg = SlConfig { simulations, robust: true, exec };
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), simulations), &cfg, |b, cfg| {
                let mut rng = seeded(2);
                b.iter(|| sl_logdensity(&s, &model, &theta, SummaryScope::Joint, cfg, &mut rng).unwrap().0)
            });
        }
    }
    group.finish();
}

fn replicate_batch(c: &mut Criterion) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/nlg-saem-smc-1000-200.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.replicates = 8;
    cfg.method = Method::SaemSmc { warmup: 20, iterations: 50, beta: 1.0, particles: 500, threshold: 100 };
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut group = c.benchmark_group("nlg_saem_smc_batch");
    group.sample_size(10);
    for workers in [1, cores] {
        let options = BatchOptions { workers, out: None };
        group.bench_with_input(BenchmarkId::new("workers", workers), &options, |b, options| {
            b.iter(|| run_batch(&cfg, options).unwrap().len())
        });
    }
    group.finish();
}

criterion_group!(benches, synthetic_likelihood, replicate_batch);
criterion_main!(benches);
