use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lorascale_bench::{lora_fixture, random_matrix};
use lorascale_core::lora::{backward_lora, forward_lora};
use lorascale_core::optim::{adam_step, AdamState};
use lorascale_core::probe::{run_probe, ProbeConfig};
use lorascale_core::tensor::matmul;
use lorascale_core::{adam_regime, GammaExp, SchemeKind};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_lora_step(c: &mut Criterion) {
    let (mut layer, z) = lora_fixture(1024, 32, 64);
    let mut st_a = AdamState::for_param(&layer.a);
    let mut st_b = AdamState::for_param(&layer.b);
    c.bench_function("lora_forward_backward_adam_n1024_r32_b64", |bench| {
        bench.iter(|| {
            let fwd = forward_lora(&layer, &z).unwrap();
            let (ga, gb) = backward_lora(&layer, &z, &fwd.za, &fwd.zbar).unwrap();
            adam_step(&mut layer.a, &ga, &mut st_a, 1e-6).unwrap();
            adam_step(&mut layer.b, &gb, &mut st_b, 1e-6).unwrap();
        })
    });
}

fn bench_regime(c: &mut Criterion) {
    let half = GammaExp::ratio(-1, 2);
    c.bench_function("adam_regime", |bench| {
        bench.iter(|| adam_regime(black_box(half), black_box(half), GammaExp::int(-1), GammaExp::int(-1), true))
    });
}

fn bench_probe(c: &mut Criterion) {
    let mut cfg = ProbeConfig::new(SchemeKind::InitA, GammaExp::ratio(-1, 2));
    cfg.widths = vec![64, 128, 256];
    cfg.seeds = 2;
    let mut group = c.benchmark_group("probe");
    group.sample_size(10);
    group.bench_function("init_a_widths_64_256", |bench| bench.iter(|| run_probe(black_box(&cfg)).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_lora_step, bench_regime, bench_probe);
criterion_main!(benches);
