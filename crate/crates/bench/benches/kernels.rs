use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use pbip::bank::kmeans_cosine;
use pbip::data::Mask;
use pbip::metrics::evaluate_pairs;
use pbip::simnet::similarity_masks;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feats = Array2::from_shape_fn((200, 32), |_| rng.random_range(-1.0..1.0));
    c.bench_function("kmeans_cosine 200x32 k=3", |b| {
        b.iter(|| kmeans_cosine(black_box(&feats), 3, 0).unwrap())
    });
}

fn similarity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = Array3::from_shape_fn((56, 56, 64), |_| rng.random_range(-1.0..1.0));
    let p = Array3::from_shape_fn((4, 3, 64), |_| rng.random_range(-1.0..1.0));
    c.bench_function("similarity_masks 56x56x64 N=4 K=3", |b| {
        b.iter(|| similarity_masks(black_box(std::slice::from_ref(&f)), black_box(std::slice::from_ref(&p))).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs: Vec<(Mask, Mask)> = (0..16)
        .map(|_| {
            let gt = Mask::from_shape_fn((64, 64), |(y, x)| ((y / 16 + x / 24) % 4) as u8);
            let pred = gt.mapv(|v| if rng.random_bool(0.1) { (v + 1) % 4 } else { v });
            (pred, gt)
        })
        .collect();
    c.bench_function("evaluate_pairs 16x64x64 r=2", |b| {
        b.iter(|| evaluate_pairs(black_box(&pairs), 4, 2).unwrap())
    });
}

criterion_group!(benches, kmeans, similarity, metrics);
criterion_main!(benches);
