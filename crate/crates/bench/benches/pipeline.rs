//! Whole-image inpainting at growing resolutions around a fixed-size
//! quarter-width network: the network share stays flat while resampling and
//! aggregation grow with the pixel count.

use std::hint::black_box;

use cra_bench::{random, square_mask};
use cra_core::generator::{inpaint_pipeline, Generator, GeneratorConfig, Inpainter};
use cra_core::resample::MethodPair;
use cra_core::Shape;
use criterion::{criterion_group, criterion_main, Criterion, Throughput};

fn pipeline(c: &mut Criterion) {
    let cfg = GeneratorConfig {
        net_size: 512,
        ..GeneratorConfig::toy()
    };
    let model = Inpainter::new(Generator::new(cfg).unwrap().init(0)).unwrap();
    let mut group = c.benchmark_group("inpaint_pipeline");
    group.sample_size(10);
    for size in [512, 1024, 2048] {
        let raw = random(Shape::new(1, 3, size, size), size as u64);
        let mask = square_mask(size);
        group.throughput(Throughput::Elements((size * size) as u64));
        group.bench_function(size.to_string(), |b| {
            b.iter(|| {
                inpaint_pipeline(&model, black_box(&raw), &mask, MethodPair::default()).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
