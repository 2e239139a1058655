use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hfm_bench::{filled, values};
use hfm_core::data::{decode_sample, encode_sample, fnv1a, Location, PatchSample};
use hfm_core::encodings::Timestamp;
use hfm_core::metrics::confusion_slices;
use hfm_core::numerics::kernels::{im2col, matmul, matmul_nt, softmax_rows, ConvGeom};
use hfm_core::numerics::Tape;
use std::hint::black_box;

fn matmuls(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 192] {
        let (a, b) = (values(n * n), values(n * n));
        g.throughput(Throughput::Elements((2 * n * n * n) as u64));
        g.bench_with_input(BenchmarkId::new("nn", n), &n, |bch, &n| bch.iter(|| matmul(black_box(&a), &b, n, n, n)));
        g.bench_with_input(BenchmarkId::new("nt", n), &n, |bch, &n| bch.iter(|| matmul_nt(black_box(&a), &b, n, n, n)));
    }
    g.finish();
}

fn rows(c: &mut Criterion) {
    let x = values(64 * 65 * 65);
    c.bench_function("softmax_rows 4160x65", |b| b.iter(|| softmax_rows(black_box(&x), 65)));
}

fn convolution(c: &mut Criterion) {
    let geom = ConvGeom { c_in: 48, h: 8, w: 8, k: 3, pad: 1 };
    let x = values(48 * 64);
    c.bench_function("im2col 48x8x8 k3", |b| b.iter(|| im2col(black_box(&x), geom)));

    let (x, w) = (filled(&[8, 32, 16, 16]), filled(&[16, 32, 3, 3]));
    c.bench_function("conv2d forward+backward 8x32x16x16", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.conv2d(xv, wv, None, 1).unwrap();
            let loss = t.sum(y);
            t.backward(loss).unwrap();
        })
    });
}

fn formats_and_metrics(c: &mut Criterion) {
    let sample = PatchSample {
        data: filled(&[3, 11, 32, 32]),
        timestamps: (0..3).map(|k| Timestamp::from_calendar(2022, 200, 600 + 15 * k, 0).unwrap()).collect(),
        label: Some(filled(&[32, 32]).map(|v| f64::from(u8::from(v > 0.9)))),
        location: Location::default(),
    };
    let bytes = encode_sample(&sample).unwrap();
    c.bench_function("container encode", |b| b.iter(|| encode_sample(black_box(&sample)).unwrap()));
    c.bench_function("container decode", |b| b.iter(|| decode_sample(black_box(&bytes)).unwrap()));
    c.bench_function("fnv1a container", |b| b.iter(|| fnv1a(black_box(&bytes))));

    let pred: Vec<f64> = values(64 * 1024).iter().map(|v| f64::from(u8::from(*v > 0.5))).collect();
    let target: Vec<f64> = values(64 * 1024 + 7)[7..].iter().map(|v| f64::from(u8::from(*v > 0.9))).collect();
    c.bench_function("confusion 64 patches", |b| b.iter(|| confusion_slices(black_box(&pred), &target).unwrap()));
}

criterion_group!(benches, matmuls, rows, convolution, formats_and_metrics);
criterion_main!(benches);
