use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use panelcf::cfiv::bootstrap_instrument_tstat;
use panelcf::dgp::{monte_carlo, simulate_panel, DgpParams, Pipeline};
use panelcf::Execution;

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn bench_monte_carlo(c: &mut Criterion) {
    let params = DgpParams {
        n_entities: 60,
        n_periods: 6,
        ..DgpParams::default()
    };
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    for (label, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(label, 50), &exec, |b, &exec| {
            b.iter(|| black_box(monte_carlo(&params, Pipeline::ControlFunction, 50, 0.05, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_bootstrap(c: &mut Criterion) {
    let params = DgpParams {
        n_entities: 80,
        ..DgpParams::default()
    };
    let sim = simulate_panel(&params).unwrap();
    let mut spec = params.feature_spec();
    spec.instruments.push("recalls_norm_lag".into());
    let mut group = c.benchmark_group("bootstrap");
    group.sample_size(10);
    for (label, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(label, 100), &exec, |b, &exec| {
            b.iter(|| black_box(bootstrap_instrument_tstat(&sim.panel, &spec, 100, 7, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_monte_carlo, bench_bootstrap);
criterion_main!(benches);
