use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hetshrink::simgen::{run_risk_experiment, Example, SimConfig};
use hetshrink::{Execution, Method};

fn config(execution: Execution) -> SimConfig {
    let mut cfg = SimConfig::study(Example::One, 7);
    cfg.p_grid = vec![100, 200];
    cfg.reps = 40;
    cfg.estimators = vec![Method::Ure, Method::UreSp, Method::Ebmle, Method::JsPlus];
    cfg.execution = execution;
    cfg
}

fn bench_modes(c: &mut Criterion) {
    let mut group = c.benchmark_group("risk_experiment");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        let cfg = config(exec);
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| run_risk_experiment(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
