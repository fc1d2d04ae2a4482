use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use spdnet_core::model::Spdnet;
use spdnet_core::spectral::detect_periods;
use spdnet_core::{backward, Forecaster, ModelConfig, Padding, Tensor, Var};

fn signal(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let t = i as f64;
            (t * 0.131).sin() + 0.3 * (t * 0.017).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn model_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("spdnet_step");
    group.sample_size(20);
    for horizon in [1usize, 24, 96] {
        let cfg = ModelConfig {
            horizon,
            ..ModelConfig::default()
        };
        let model = Spdnet::new(&cfg, 1).unwrap();
        let x = Var::constant(signal(&[cfg.batch_size, cfg.seq_len, 1]));
        let y = Var::constant(signal(&[cfg.batch_size, horizon, 1]));
        group.bench_with_input(BenchmarkId::new("forward", horizon), &horizon, |b, _| {
            b.iter(|| black_box(model.forward(&x).unwrap()))
        });
        group.bench_with_input(
            BenchmarkId::new("forward_backward", horizon),
            &horizon,
            |b, _| {
                b.iter(|| {
                    for p in model.parameters() {
                        p.zero_grad();
                    }
                    let loss = model.forward(&x).unwrap().mse(&y).unwrap();
                    backward(&loss).unwrap();
                })
            },
        );
    }
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let a = signal(&[32, 96, 64]);
    let w = signal(&[64, 64]);
    c.bench_function("matmul_32x96x64_by_64x64", |b| {
        b.iter(|| black_box(a.matmul(&w).unwrap()))
    });

    let x = signal(&[32, 4, 96]);
    let k = signal(&[4, 1, 25]);
    c.bench_function("conv1d_depthwise_k25", |b| {
        b.iter(|| black_box(x.conv1d(&k, Padding::Same, 4).unwrap()))
    });

    let plane = signal(&[32, 1, 24, 4]);
    let k2 = signal(&[1, 1, 3, 3]);
    c.bench_function("conv2d_3x3", |b| {
        b.iter(|| black_box(plane.conv2d(&k2, Padding::Same).unwrap()))
    });

    let window = signal(&[32, 96, 1]);
    c.bench_function("detect_periods_s96", |b| {
        b.iter(|| black_box(detect_periods(&window, 3).unwrap()))
    });
}

criterion_group!(benches, model_step, kernels);
criterion_main!(benches);
