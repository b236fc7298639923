//! Sequential vs data-parallel execution of the hot kernels and of one
//! modulation-layer forward/backward pass.
//!
//! With the `parallel` feature off both arms run the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use std::hint::black_box;
use stfocal::exec::with_parallel;
use stfocal::kernels::conv::{dwconv1d, dwconv2d, Dims1d, Dims2d};
use stfocal::kernels::matmul::matmul;
use stfocal::SeededRng as Rng;
use stfocal::{FocalConfig, FocalLayer, Graph, MixerKind, ParamStore, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn bench_kernels(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(0);
    let d2 = Dims2d {
        n: 8,
        h: 32,
        w: 32,
        c: 64,
    };
    let x2: Tensor<f32> = Tensor::randn(&[8 * 32 * 32 * 64], 1.0, &mut rng);
    let k2: Tensor<f32> = Tensor::randn(&[5 * 5 * 64], 1.0, &mut rng);
    let mut out2 = vec![0.0f32; x2.numel()];

    let d1 = Dims1d { n: 1024, t: 16, c: 64 };
    let k1: Tensor<f32> = Tensor::randn(&[5 * 64], 1.0, &mut rng);

    let (p, k, n) = (4096, 128, 128);
    let a: Tensor<f32> = Tensor::randn(&[p * k], 1.0, &mut rng);
    let w: Tensor<f32> = Tensor::randn(&[k * n], 1.0, &mut rng);
    let mut out_mm = vec![0.0f32; p * n];

    let mut group = c.benchmark_group("kernels");
    for (name, par) in modes() {
        group.bench_function(BenchmarkId::new("dwconv2d_5x5", name), |b| {
            b.iter(|| with_parallel(par, || dwconv2d(x2.data(), d2, k2.data(), 5, black_box(&mut out2))))
        });
        group.bench_function(BenchmarkId::new("dwconv1d_5", name), |b| {
            b.iter(|| with_parallel(par, || dwconv1d(x2.data(), d1, k1.data(), 5, black_box(&mut out2))))
        });
        group.bench_function(BenchmarkId::new("matmul_4096x128x128", name), |b| {
            b.iter(|| with_parallel(par, || matmul(a.data(), p, k, w.data(), n, black_box(&mut out_mm))))
        });
    }
    group.finish();
}

fn bench_layer(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(1);
    let cfg = FocalConfig::default();
    let mut store = ParamStore::new();
    let layer = FocalLayer::new(&mut store, &mut rng, "m", MixerKind::SpatioTemporal, 32, &cfg).unwrap();
    let x: Tensor<f32> = Tensor::randn(&[2, 8, 16, 16, 32], 1.0, &mut rng);
    let mut group = c.benchmark_group("modulation_layer");
    group.sample_size(20);
    for (name, par) in modes() {
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                with_parallel(par, || {
                    let mut g = Graph::new();
                    let xv = g.input(x.clone());
                    let y = layer.forward(&mut g, &store, xv, None).unwrap().unwrap();
                    let s = g.sum(y).unwrap();
                    black_box(g.backward(s).unwrap());
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_kernels, bench_layer);
criterion_main!(benches);
