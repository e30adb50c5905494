use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use asyncsim::microbench::{init_data, run_sweep};
use asyncsim::patterns::emulate;
use asyncsim::{simulate, WaitKind};
use asyncsim_bench::{grid, machine, overlap_workload, small_sweep, sync_workload, ELEMENTS};

fn simulate_patterns(c: &mut Criterion) {
    let m = machine();
    let mut group = c.benchmark_group("simulate");
    group.sample_size(20);
    for iterations in [1u32, 64] {
        let sync = sync_workload(iterations);
        group.bench_with_input(BenchmarkId::new("sync", iterations), &sync, |b, w| {
            b.iter(|| simulate(black_box(w), &m, grid()).unwrap())
        });
        for wait in [WaitKind::Barrier, WaitKind::Pipeline] {
            let w = overlap_workload(iterations, wait);
            let id = BenchmarkId::new(format!("overlap-{wait}"), iterations);
            group.bench_with_input(id, &w, |b, w| b.iter(|| simulate(black_box(w), &m, grid()).unwrap()));
        }
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let m = machine();
    let cfg = small_sweep();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    group.bench_function("small", |b| b.iter(|| run_sweep(black_box(&cfg), &m).unwrap()));
    group.finish();
}

fn emulation(c: &mut Criterion) {
    let input = init_data(ELEMENTS, 1);
    let w = overlap_workload(8, WaitKind::Pipeline);
    c.bench_function("emulate/overlap-8", |b| b.iter(|| emulate(black_box(&w), &input).unwrap()));
}

criterion_group!(benches, simulate_patterns, sweep, emulation);
criterion_main!(benches);
