use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use riskmm::corridor::{CorridorConfig, CorridorSetup};
use riskmm::oracle::{check_gradients, check_sandwich};
use riskmm::par::{self, Execution};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn closed_loop_seeds(c: &mut Criterion) {
    let mut cfg = CorridorConfig::default();
    cfg.horizon.n = 8;
    cfg.horizon.n_b = 2;
    cfg.simulate.steps = 10;
    let setup = CorridorSetup::new(cfg).unwrap();
    let seeds: Vec<u64> = (0..8).collect();

    let mut group = c.benchmark_group("closed_loop_8_seeds");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let runs = par::map(exec, &seeds, |&s| setup.simulate(s).unwrap().metrics);
                black_box(runs)
            })
        });
    }
    group.finish();
}

fn oracle_batches(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_batches");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("gradients_20", name), |b| {
            b.iter(|| black_box(check_gradients(20, 0, exec)))
        });
        group.bench_function(BenchmarkId::new("sandwich_100", name), |b| {
            b.iter(|| black_box(check_sandwich(100, &[0.1, 1.0, 10.0], 0, exec)))
        });
    }
    group.finish();
}

criterion_group!(benches, closed_loop_seeds, oracle_batches);
criterion_main!(benches);
