//! Parallel vs sequential execution of independent simulation runs.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sdmsim::attack::{run_attack, AttackKind};
use sdmsim::par;
use sdmsim::sim::{self, build_table, AblationFlags, Layout, RunConfig, WorkloadConfig};
use sdmsim::trace::Pattern;

fn sweep_runs(c: &mut Criterion) {
    let cfg = RunConfig {
        layout: Layout::WorstCase,
        sdm_bytes: 1 << 30,
        workload: WorkloadConfig {
            pattern: Pattern::Mixed,
            pages: 1 << 18,
            ops: 5000,
            ..Default::default()
        },
        ..Default::default()
    };
    let traces = cfg.generate_traces().unwrap();
    let table = Arc::new(build_table(&cfg));
    let sizes = [8usize, 16, 32, 64, 128, 256, 512, 1024];
    let one = |&size: &usize| {
        let c = RunConfig {
            cache_entries: size,
            ..cfg.clone()
        };
        sim::run_with_table(c, table.clone(), &traces).unwrap().report.totals.cycles_max
    };

    let mut g = c.benchmark_group("cache-sweep");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", sizes.len()), |b| {
        b.iter(|| par::map_sequential(&sizes, one))
    });
    g.bench_function(BenchmarkId::new("parallel", sizes.len()), |b| b.iter(|| par::map(&sizes, one)));
    g.finish();
}

fn attack_runs(c: &mut Criterion) {
    let kinds = AttackKind::ALL;
    let one = |&k: &AttackKind| run_attack(k, AblationFlags::default()).unwrap().passed;

    let mut g = c.benchmark_group("attack-suite");
    g.bench_function("sequential", |b| b.iter(|| par::map_sequential(&kinds, one)));
    g.bench_function("parallel", |b| b.iter(|| par::map(&kinds, one)));
    g.finish();
}

criterion_group!(benches, sweep_runs, attack_runs);
criterion_main!(benches);
