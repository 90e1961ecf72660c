use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sct_core::loss::{BackboneConfig, FrozenBackbone};
use sct_core::ope::{evaluate, BoundingBox, TrajectoryPair};
use sct_core::{robust_enhance, CurveMaps, ImageTensor, ProjectionConfig, SctConfig, SctModel, Tensor};

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |_, _, _| rng.random::<f64>())
}

fn projection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = image(&mut rng, 256, 256);
    let illum = Tensor::from_fn(&[3, 256, 256], |_| rng.random_range(-1.0..1.0));
    let noise = Tensor::from_fn(&[3, 256, 256], |_| rng.random_range(-0.1..0.1));
    let maps = CurveMaps::new(illum, noise).unwrap();
    let mut g = c.benchmark_group("projection_256");
    for t in [1, 8] {
        let cfg = ProjectionConfig::with_iterations(t);
        g.bench_with_input(BenchmarkId::from_parameter(t), &cfg, |b, cfg| {
            b.iter(|| robust_enhance(black_box(&x), &maps, cfg).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("enhance");
    g.sample_size(10);
    for (name, cfg) in [("tiny", SctConfig::tiny()), ("default", SctConfig::default())] {
        let model = SctModel::build(cfg, 0).unwrap();
        let x = image(&mut rng, 256, 256);
        g.bench_function(name, |b| b.iter(|| model.enhance(black_box(&x)).unwrap()));
    }
    g.finish();

    let backbone = FrozenBackbone::new(BackboneConfig::default(), 0).unwrap();
    let x = image(&mut rng, 128, 128);
    c.bench_function("backbone_features_128", |b| {
        b.iter(|| backbone.extract(black_box(&x)).unwrap())
    });
}

fn ope(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut track = |jitter: f64| -> Vec<BoundingBox> {
        (0..1000)
            .map(|i| {
                let x = i as f64 + rng.random_range(-jitter..=jitter);
                BoundingBox::new(x, 50.0, 40.0, 30.0).unwrap()
            })
            .collect()
    };
    let truth = track(0.0);
    let pred = track(15.0);
    let pair = TrajectoryPair::new("bench", pred, truth).unwrap();
    c.bench_function("ope_1000_frames", |b| b.iter(|| evaluate(black_box(&pair))));
}

criterion_group!(benches, projection, forward, ope);
criterion_main!(benches);
