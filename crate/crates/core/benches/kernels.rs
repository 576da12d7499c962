//! Parallel-vs-sequential kernel benchmarks. `matmul` dispatches to rayon
//! when the `parallel` feature (default) is on; `matmul_seq` is always the
//! sequential reference, so one run shows both sides. Build with
//! `--no-default-features` to measure the fully sequential conv path too.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use metricformer::kernels::{conv2d_forward, matmul, matmul_seq};

fn data(n: usize, salt: usize) -> Vec<f32> {
    (0..n).map(|i| ((i + salt) as f32 * 0.137).sin()).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (128, 256, 128);
    let a = data(m * k, 1);
    let b = data(k * n, 2);
    let mut group = c.benchmark_group("matmul_128x256x128");
    group.bench_function("dispatch", |bch| {
        bch.iter(|| {
            let mut out = vec![0.0f32; m * n];
            matmul(&mut out, black_box(&a), black_box(&b), m, k, n);
            out
        })
    });
    group.bench_function("sequential", |bch| {
        bch.iter(|| {
            let mut out = vec![0.0f32; m * n];
            matmul_seq(&mut out, black_box(&a), black_box(&b), m, k, n);
            out
        })
    });
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    // one desk-scale stage-entry conv: 8 x 32ch 16x16 -> 64ch 8x8
    let (b, cin, h, w) = (8, 32, 16, 16);
    let (cout, kk, stride, pad) = (64, 3, 2, 1);
    let x = data(b * cin * h * w, 3);
    let k = data(cout * cin * kk * kk, 4);
    let ho = metricformer::kernels::conv_out_len(h, kk, stride, pad);
    let wo = metricformer::kernels::conv_out_len(w, kk, stride, pad);
    c.bench_function("conv2d_8x32x16x16_to_64", |bch| {
        bch.iter(|| {
            let mut out = vec![0.0f32; b * cout * ho * wo];
            conv2d_forward(
                &mut out,
                black_box(&x),
                black_box(&k),
                b,
                cin,
                h,
                w,
                cout,
                kk,
                kk,
                stride,
                pad,
            );
            out
        })
    });
}

criterion_group!(benches, bench_matmul, bench_conv);
criterion_main!(benches);
