//! Trial batches and permutation importance on the rayon pool versus the
//! calling thread. Both paths return identical results; only time differs.
//! Build with `--no-default-features` to see the sequential fallback alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deskbot_core::harness::{Harness, Task, TrialSpec};
use deskbot_core::nlu::{desk_corpus, Dataset, HashedNgrams};
use deskbot_core::par::Execution;
use deskbot_core::pruning::{permutation_importance, Unit};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn trials(c: &mut Criterion) {
    let harness = Harness::desk().unwrap();
    let spec = TrialSpec {
        trials: 64,
        wer: 0.05,
        clutter_fraction: 0.25,
        seed: 1,
        ..TrialSpec::new(Task::Cup, "Please hand me the water cup")
    };
    let mut group = c.benchmark_group("run_trials_64_cup");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(harness.run_trials(&spec, "C1", exec).unwrap()))
        });
    }
    group.finish();
}

fn importance(c: &mut Criterion) {
    let harness = Harness::desk().unwrap();
    let model = harness.nlu.model().clone();
    let data = Dataset::from_corpus(&desk_corpus(), &HashedNgrams::default(), &model.labels).unwrap();
    let mut group = c.benchmark_group("permutation_importance_k5");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(permutation_importance(&model, &data, Unit::Input, 5, 7, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, trials, importance);
criterion_main!(benches);
