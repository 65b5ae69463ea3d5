use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use langmerge_bench::{synthetic_checkpoint, synthetic_sentence};
use langmerge_core::metrics::edit_distance;
use langmerge_core::{
    apply_task_vector, compute_task_vector, mock_eval, optimize, MockObjective, NamePolicy,
    OptimizerConfig,
};

fn task_vectors(c: &mut Criterion) {
    let mut group = c.benchmark_group("apply_task_vector");
    for dim in [64, 256] {
        let base = synthetic_checkpoint(8, dim, 0);
        let support = synthetic_checkpoint(8, dim, 1);
        let target = synthetic_checkpoint(8, dim, 2);
        let tv = compute_task_vector(&support, &base, NamePolicy::Strict).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| apply_task_vector(black_box(&target), &tv, 0.3, NamePolicy::Strict).unwrap())
        });
    }
    group.finish();
}

fn levenshtein(c: &mut Criterion) {
    let mut group = c.benchmark_group("edit_distance");
    for words in [20, 200] {
        let reference = synthetic_sentence(words, 0);
        let hypothesis = synthetic_sentence(words, 1);
        group.bench_with_input(BenchmarkId::from_parameter(words), &words, |b, _| {
            b.iter(|| edit_distance(black_box(&reference), black_box(&hypothesis)))
        });
    }
    group.finish();
}

fn tuning(c: &mut Criterion) {
    let obj = MockObjective::default();
    let config = OptimizerConfig::default();
    c.bench_function("optimize_budget_10", |b| {
        b.iter(|| optimize(|l| Ok(mock_eval(&obj, l)), black_box(&config)).unwrap())
    });
}

criterion_group!(benches, task_vectors, levenshtein, tuning);
criterion_main!(benches);
