use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ear_core::backend::BlobWorld;
use ear_core::grad::{gradcheck_sweep, SweepOptions};
use ear_core::losses::LossConfig;
use ear_core::par::Execution;
use ear_core::pipeline::{batch_run, three_entity_scene, BatchOptions, GridCell, PipelineConfig, RunMode, ScenarioSuite};
use ear_core::verifier::OracleVerifier;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch(c: &mut Criterion) {
    let backend = BlobWorld::default();
    let suite = ScenarioSuite::mixed(8, 0);
    let grid = [GridCell {
        label: "full".into(),
        config: PipelineConfig::default(),
    }];
    let mut group = c.benchmark_group("batch_run");
    group.sample_size(10);
    for (name, execution) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &execution, |b, &execution| {
            b.iter(|| {
                batch_run(
                    &backend,
                    black_box(&suite),
                    &grid,
                    &OracleVerifier,
                    BatchOptions {
                        mode: RunMode::Generate,
                        execution,
                        jobs: None,
                    },
                )
            })
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let backend = BlobWorld::default();
    let cs = three_entity_scene(0);
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("gradcheck_sweep");
    group.sample_size(10);
    for (name, execution) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &execution, |b, &execution| {
            b.iter(|| {
                gradcheck_sweep(
                    &backend,
                    black_box(&cs),
                    &LossConfig::default(),
                    &seeds,
                    SweepOptions {
                        execution,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch, sweep);
criterion_main!(benches);
