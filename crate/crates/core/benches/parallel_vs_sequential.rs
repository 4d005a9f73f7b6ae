use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use stosqp::experiment::bundled_dataset;
use stosqp::exec::{self, Execution};
use stosqp::logreg::{build_instance, synthetic_dataset, LogRegInstance, MinibatchOracle};
use stosqp::problem::{estimate_variance, Problem};
use stosqp::solver::{run_with, BetaSchedule, SolverConfig};
use stosqp::SqpRng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn large_instance(exec: Execution) -> LogRegInstance {
    let ds = synthetic_dataset(100, 20_000, 1.0, 0.3, 3.0, 11);
    build_instance(ds, 10, 0).unwrap().with_execution(exec)
}

fn full_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("full_gradient_20k");
    for (name, exec) in MODES {
        let inst = large_instance(exec);
        let x = inst.initial_point();
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(inst.gradient(black_box(&x)))));
    }
    group.finish();
}

fn variance(c: &mut Criterion) {
    let inst = build_instance(bundled_dataset(), 10, 0).unwrap();
    let oracle = MinibatchOracle::new(&inst);
    let x = inst.initial_point();
    let mut group = c.benchmark_group("variance_estimate_2000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut rng = SqpRng::seed_from_u64(1);
                black_box(estimate_variance(&oracle, &x, 16, 2000, &mut rng, exec).unwrap())
            })
        });
    }
    group.finish();
}

fn replicates(c: &mut Criterion) {
    let inst = build_instance(bundled_dataset(), 10, 0).unwrap();
    let (l, g) = inst.lipschitz_bounds();
    let oracle = MinibatchOracle::new(&inst);
    let mut group = c.benchmark_group("replicates_4x1000");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec::map_indexed(exec, 4, |seed| {
                    let cfg = SolverConfig {
                        lipschitz_grad: l,
                        lipschitz_jac: g,
                        beta: BetaSchedule::Power {
                            beta1: 1.0,
                            exponent: 1.0,
                            warmup: 1000.0,
                        },
                        iterations: 1000,
                        seed: seed as u64,
                        ..Default::default()
                    };
                    run_with(&inst, &oracle, &cfg, |_| {}).unwrap().final_x
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, full_gradient, variance, replicates);
criterion_main!(benches);
