use asymnet_bench::{dataset, model};
use asymnet_core::eval::{evaluate, rank_gallery, score_pair};
use asymnet_core::EvalOptions;
use criterion::{criterion_group, criterion_main, Criterion};

fn scoring(c: &mut Criterion) {
    let ds = dataset(16, 200);
    let m = model(&ds, 64);
    let traj = &ds.trajectories()[0];
    c.bench_function("score_pair", |b| b.iter(|| score_pair(&m, traj, &ds.gallery()[0]).unwrap()));

    let mut group = c.benchmark_group("ranking");
    group.sample_size(10);
    group.bench_function("rank_gallery_200", |b| b.iter(|| rank_gallery(&m, traj, ds.gallery()).unwrap()));
    group.bench_function("evaluate_16x200", |b| {
        b.iter(|| evaluate(&m, &ds, &EvalOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
