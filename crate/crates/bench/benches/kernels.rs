use std::hint::black_box;

use cra_bench::{random, square_mask};
use cra_core::attention::{aggregate_residuals, compute_scores, partition_cells};
use cra_core::conv::{conv2d, conv2d_input_grad, conv2d_weight_grad, conv_macs, ConvParams};
use cra_core::resample::{contextual_residual, MethodPair};
use cra_core::Shape;
use criterion::{criterion_group, criterion_main, Criterion, Throughput};

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (name, x, w, p) in [
        (
            "c32_64x64_k3",
            Shape::new(1, 32, 64, 64),
            Shape::new(32, 32, 3, 3),
            ConvParams::new(1, 1),
        ),
        (
            "c64_32x32_k3_d4",
            Shape::new(1, 64, 32, 32),
            Shape::new(64, 64, 3, 3),
            ConvParams::new(1, 4),
        ),
        (
            "c4_256x256_k5_s2",
            Shape::new(1, 4, 256, 256),
            Shape::new(32, 4, 5, 5),
            ConvParams::new(2, 1),
        ),
    ] {
        let (xt, wt) = (random(x, 1), random(w, 2));
        let y = conv2d(&xt, &wt, p).unwrap();
        group.throughput(Throughput::Elements(conv_macs(x, w, p)));
        group.bench_function(format!("{name}/forward"), |b| {
            b.iter(|| conv2d(black_box(&xt), &wt, p).unwrap())
        });
        group.bench_function(format!("{name}/input_grad"), |b| {
            b.iter(|| conv2d_input_grad(black_box(&y), &wt, p, x.h, x.w).unwrap())
        });
        group.bench_function(format!("{name}/weight_grad"), |b| {
            b.iter(|| conv2d_weight_grad(black_box(&xt), &y, p, w.h, w.w).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let map = random(Shape::new(1, 128, 32, 32), 3);
    let part = partition_cells(&square_mask(512), 32).unwrap();
    c.bench_function("attention/scores_32x32_c128", |b| {
        b.iter(|| compute_scores(black_box(&map), &part).unwrap())
    });

    let scores = compute_scores(&map, &part).unwrap();
    let residual = random(Shape::new(1, 3, 2048, 2048), 4);
    c.bench_function("attention/aggregate_2048", |b| {
        b.iter(|| aggregate_residuals(black_box(&residual), &scores).unwrap())
    });
}

fn resampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("contextual_residual");
    for size in [1024, 2048] {
        let raw = random(Shape::new(1, 3, size, size), 5);
        group.throughput(Throughput::Elements((size * size) as u64));
        group.bench_function(size.to_string(), |b| {
            b.iter(|| contextual_residual(black_box(&raw), 512, MethodPair::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, attention, resampling);
criterion_main!(benches);
