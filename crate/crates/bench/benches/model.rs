use criterion::{criterion_group, criterion_main, Criterion};
use defunet::autodiff::Tape;
use defunet::metrics::dice_loss_var;
use defunet::model::{Model, ModelConfig};
use defunet::tensor::BnMode;
use defunet::Tensor;
use std::hint::black_box;

fn input() -> (Tensor<f32>, Tensor<f32>) {
    let x = Tensor::from_fn([2, 1, 64, 64], |n, _, h, w| ((h * 7 + w * 3 + n) % 17) as f32 / 17.0);
    let y = Tensor::from_fn([2, 1, 64, 64], |_, _, h, w| {
        if (h as i32 - 32).abs() + (w as i32 - 32).abs() < 20 {
            1.0
        } else {
            0.0
        }
    });
    (x, y)
}

fn forward_backward(cr: &mut Criterion) {
    let mut g = cr.benchmark_group("model_step_64px_batch2");
    g.sample_size(10);
    for (name, cfg) in [
        ("defunet_f8", ModelConfig::default().with_base_filters(8)),
        ("unet_f8", ModelConfig::unet().with_base_filters(8)),
    ] {
        let mut model = Model::<f32>::build(&cfg, 0).unwrap();
        let (x, y) = input();
        g.bench_function(name, |b| {
            b.iter(|| {
                let tape = Tape::new();
                let xv = tape.input(black_box(x.clone()));
                let p = model.forward(&tape, &xv, BnMode::Train).unwrap();
                let loss = dice_loss_var(&tape, &p, &y).unwrap();
                tape.backward(&loss).unwrap()
            })
        });
        g.bench_function(format!("{name}_predict"), |b| {
            b.iter(|| model.predict(black_box(&x)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
