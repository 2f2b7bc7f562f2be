use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use muse_bench::{params, point_clouds, roi, small_crops, small_model, trainer, view_sets};
use muse_core::distill::train_step;
use muse_core::matching::match_points;
use muse_core::model::forward_bundle;
use muse_core::numerics::ops::bilinear_sample;
use muse_core::sampler::multi_crop;
use muse_core::SeededRng;
use std::hint::black_box;

fn sampling(c: &mut Criterion) {
    let patch = roi(1);
    let crops = small_crops();
    c.bench_function("multi_crop", |b| {
        let mut rng = SeededRng::new(2);
        b.iter(|| multi_crop(black_box(&patch), &crops, &mut rng).unwrap())
    });
    let map = muse_core::Tensor::full(&[8, 32, 32], 0.5);
    c.bench_function("bilinear_sample", |b| b.iter(|| bilinear_sample(black_box(&map), 37.3, 61.9, 2.0).unwrap()));
}

fn matching(c: &mut Criterion) {
    let (pred, gt) = point_clouds(64);
    c.bench_function("match_points_64", |b| b.iter(|| match_points(black_box(&pred), black_box(&gt), 6.0)));
}

fn model(c: &mut Criterion) {
    let cfg = small_model();
    let p = params(&cfg);
    let image = roi(3).image;
    let crop = muse_core::numerics::ops::resize_bilinear(&image, 48, 48).unwrap();
    c.bench_function("forward_bundle_48", |b| b.iter(|| forward_bundle(&p, &cfg, black_box(&crop)).unwrap()));

    let batch = view_sets(2);
    let mut group = c.benchmark_group("distill");
    group.sample_size(10);
    group.bench_function("train_step_batch2", |b| {
        b.iter_batched(
            || trainer(&cfg),
            |(mut state, dcfg)| {
                let sched = dcfg.step_schedule(0);
                train_step(&mut state, &batch, &cfg, &dcfg, sched).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, sampling, matching, model);
criterion_main!(benches);
