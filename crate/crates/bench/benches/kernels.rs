use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use egiinet_core::geometry::{chamfer_l2, fps, nn_brute};
use egiinet_core::synth::{generate_sample, ShapeFamily};
use egiinet_core::{Model, PointCloud, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("chamfer_l2");
    for n in [256, 1024] {
        let (a, b) = (cloud(&mut rng, n), cloud(&mut rng, n));
        group.bench_with_input(BenchmarkId::new("gemm", n), &n, |bench, _| {
            bench.iter(|| chamfer_l2(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("brute", n), &n, |bench, _| {
            bench.iter(|| nn_brute(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pc = cloud(&mut rng, 512);
    c.bench_function("fps_512_to_128", |b| b.iter(|| fps(black_box(&pc), 128, 0).unwrap()));
}

fn model(c: &mut Criterion) {
    let cfg = RunConfig::small();
    let model = Model::from_run_config(&cfg).unwrap();
    let (s, _, _) = generate_sample("bench", ShapeFamily::Torus, 3, &cfg.data).unwrap();
    let prepared = model.prepare(&s.partial, &s.view, Some(&s.complete)).unwrap();
    let mut group = c.benchmark_group("small_model");
    group.sample_size(20);
    group.bench_function("prepare", |b| {
        b.iter(|| model.prepare(black_box(&s.partial), black_box(&s.view), None).unwrap())
    });
    group.bench_function("forward", |b| b.iter(|| model.predict_prepared(black_box(&prepared)).unwrap()));
    group.bench_function("forward_backward", |b| b.iter(|| model.loss_and_grads(black_box(&prepared)).unwrap()));
    group.finish();
}

criterion_group!(benches, metrics, sampling, model);
criterion_main!(benches);
