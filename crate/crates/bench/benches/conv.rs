use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use defunet::tensor::{conv2d_backward, conv2d_with, ConvAlgo, ConvSpec};
use defunet::{Shape, Tensor};
use std::hint::black_box;

fn ramp(shape: impl Into<Shape>) -> Tensor<f32> {
    let mut i = 0u32;
    Tensor::from_fn(shape, |_, _, _, _| {
        i = i.wrapping_mul(1_103_515_245).wrapping_add(12_345);
        (i >> 16) as f32 / 65_536.0 - 0.5
    })
}

fn specs(c: usize) -> Vec<(&'static str, ConvSpec)> {
    vec![
        ("3x3", ConvSpec::new(c, c, (3, 3))),
        ("3x3_rate31", ConvSpec::new(c, c, (3, 3)).dilation(3, 1)),
        ("3x3_rate12", ConvSpec::new(c, c, (3, 3)).dilation(1, 2)),
        ("1x1", ConvSpec::new(c, c, (1, 1))),
    ]
}

fn forward(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("conv2d_forward");
    let x = ramp([2, 32, 64, 64]);
    let b = Tensor::zeros(Shape::vector(32));
    for (name, spec) in specs(32) {
        let w = ramp(spec.weight_shape());
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            g.bench_with_input(BenchmarkId::new(name, format!("{algo:?}")), &spec, |bench, spec| {
                bench.iter(|| conv2d_with(black_box(&x), &w, &b, spec, algo).unwrap())
            });
        }
    }
    g.finish();
}

fn backward(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("conv2d_backward");
    let x = ramp([2, 32, 64, 64]);
    let gy = ramp([2, 32, 64, 64]);
    for (name, spec) in specs(32) {
        let w = ramp(spec.weight_shape());
        g.bench_function(name, |bench| {
            bench.iter(|| conv2d_backward(black_box(&x), &w, &gy, &spec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
