//! Sequential vs data-parallel execution of the per-query hot loops:
//! padding, ranking + nDCG, and a whole stub-backed grid.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use esci_eval::dataset_ops::{pad_with_irrelevant_from, PadConfig};
use esci_eval::fixtures::{self, FILTERED_SAMPLE_EQ_RATIO, FILTERED_SAMPLE_PROPORTIONS};
use esci_eval::metrics::{ndcg, GainScheme, KPolicy, RunScores, Weighting};
use esci_eval::par::ExecMode;
use esci_eval::rankers::rank_random;
use esci_eval::runner::{run_experiment_on, Approach, DataPaths, ExperimentConfig, RunContext};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn padding(c: &mut Criterion) {
    let dataset = fixtures::proportional(2000, 4000, FILTERED_SAMPLE_PROPORTIONS, FILTERED_SAMPLE_EQ_RATIO, 1);
    let mut group = c.benchmark_group("pad_to_20");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| pad_with_irrelevant_from(black_box(&dataset), PadConfig { pad_size: 20, seed: 3 }, None, mode))
        });
    }
    group.finish();
}

fn rank_and_score(c: &mut Criterion) {
    let base = fixtures::proportional(2000, 4000, FILTERED_SAMPLE_PROPORTIONS, FILTERED_SAMPLE_EQ_RATIO, 1);
    let padded = pad_with_irrelevant_from(&base, PadConfig { pad_size: 20, seed: 3 }, None, ExecMode::Sequential).dataset;
    let queries: Vec<String> = padded.queries().iter().map(|q| q.query_id.clone()).collect();
    let gains = GainScheme::default();
    let mut group = c.benchmark_group("random_rank_ndcg");
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| {
                let outcomes = mode.map(&queries, |qid| {
                    let examples: Vec<String> =
                        padded.judgments().for_query(qid).iter().map(|j| j.product_id.clone()).collect();
                    let ranking = rank_random(qid, &examples, 11);
                    (qid.clone(), ndcg(&ranking, padded.judgments(), &gains, KPolicy::Full).unwrap())
                });
                let scores: RunScores = outcomes.into_iter().collect();
                black_box(scores.dataset_score(Weighting::Unweighted))
            })
        });
    }
    group.finish();
}

fn stub_grid(c: &mut Criterion) {
    let dataset = fixtures::standard(5);
    let mut group = c.benchmark_group("stub_grid");
    group.sample_size(10);
    for jobs in [1usize, 4] {
        let mut config = ExperimentConfig::new(DataPaths::default());
        config.approaches = vec![Approach::Random, Approach::MostPopular, Approach::Text];
        config.runs = 2;
        config.jobs = Some(jobs);
        group.bench_with_input(BenchmarkId::new("jobs", jobs), &config, |b, config| {
            b.iter(|| {
                let ctx = RunContext::stubs();
                run_experiment_on(config, &dataset, &ctx).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, padding, rank_and_score, stub_grid);
criterion_main!(benches);
