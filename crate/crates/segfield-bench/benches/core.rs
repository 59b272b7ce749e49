use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segfield_core::features::{FeatureBackend, StubBackend};
use segfield_core::field::{FieldConfig, NeuralField};
use segfield_core::fusion::{FusionConfig, FusionHead};
use segfield_core::nn::ParamStore;
use segfield_core::pseudo::{assign_pseudo_labels, ClassCentroids, DistanceMetric};
use segfield_core::volume::compute_weights;

fn bench_compute_weights(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sigmas: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..3.0)).collect();
    let deltas: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.3)).collect();
    c.bench_function("compute_weights_64", |b| {
        b.iter(|| compute_weights(black_box(&sigmas), black_box(&deltas)).unwrap())
    });
}

fn bench_field_query(c: &mut Criterion) {
    let config = FieldConfig {
        position_freqs: 6,
        direction_freqs: 3,
        hidden_width: 48,
        depth: 3,
        base_feature_dim: 16,
        position_scale: 3.0,
    };
    let mut store = ParamStore::new();
    let field = NeuralField::init(&mut store, config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let points = Array2::from_shape_fn((2048, 3), |_| rng.random_range(-2.0..2.0));
    let mut dirs = Array2::from_shape_fn((2048, 3), |_| rng.random_range(-1.0..1.0));
    for mut row in dirs.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    c.bench_function("field_query_2048_points", |b| {
        b.iter(|| {
            field
                .query(&store, black_box(points.view()), Some(black_box(dirs.view())))
                .unwrap()
        })
    });
}

fn bench_fusion_forward(c: &mut Criterion) {
    let config = FusionConfig {
        model_dim: 32,
        head_count: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        feedforward_dim: 64,
        semantic_dim: 2,
        depth_encoding: true,
    };
    let mut store = ParamStore::new();
    let head = FusionHead::init(&mut store, config, 16, 32, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rays = 64;
    let samples = 32;
    let base = Array2::from_shape_fn((rays * samples, 16), |_| rng.random_range(-1.0..1.0));
    let prior = Array2::from_shape_fn((rays, 32), |_| rng.random_range(-1.0..1.0));
    let depths = Array1::from_shape_fn(rays * samples, |i| (i % samples) as f64 / samples as f64);
    c.bench_function("fusion_forward_64x32", |b| {
        b.iter(|| {
            head.infer(
                &store,
                black_box(&base),
                Some(depths.view()),
                Some(black_box(&prior)),
                rays,
                samples,
            )
            .unwrap()
        })
    });
}

fn bench_stub_extract(c: &mut Criterion) {
    let img = RgbImage::from_fn(128, 128, |x, y| {
        Rgb([(x * 2) as u8, (y * 2) as u8, ((x + y) % 256) as u8])
    });
    c.bench_function("stub_extract_128", |b| {
        b.iter(|| StubBackend.extract(black_box(&img)).unwrap())
    });
}

fn bench_pseudo_assign(c: &mut Criterion) {
    let img = RgbImage::from_fn(64, 64, |x, _, | Rgb([if x < 32 { 220 } else { 40 }, 60, 80]));
    let fmap = StubBackend.extract(&img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centroids = ClassCentroids {
        centroids: Array2::from_shape_fn((3, fmap.feature_dim()), |_| rng.random_range(0.0..1.0)),
        counts: vec![10, 10, 10],
        metric: DistanceMetric::Euclidean,
    };
    c.bench_function("pseudo_assign_64x64", |b| {
        b.iter(|| assign_pseudo_labels(black_box(&fmap), black_box(&centroids), 0).unwrap())
    });
}

criterion_group!(
    benches,
    bench_compute_weights,
    bench_field_query,
    bench_fusion_forward,
    bench_stub_extract,
    bench_pseudo_assign
);
criterion_main!(benches);
