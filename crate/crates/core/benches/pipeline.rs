//! Data-parallel paths against the sequential fallback.
//!
//! With default features each workload runs on the global rayon pool and on
//! a one-thread pool. `cargo bench --no-default-features` builds the plain
//! sequential loops; criterion keeps both under distinct ids so the reports
//! line up.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use voxdet_core::config::RunConfig;
use voxdet_core::dataset::{generate, DataConfig};
use voxdet_core::scene::{place_cameras, render_view, sample_scene, CameraConfig, SceneConfig};
use voxdet_core::train::Trainer;
use voxdet_tensor::par;

fn modes() -> Vec<(String, Option<rayon::ThreadPool>)> {
    if !par::is_parallel() {
        return vec![("sequential".into(), None)];
    }
    let all = rayon::current_num_threads();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![(format!("rayon-{all}"), None), ("rayon-1".into(), Some(one))]
}

fn run<R>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn bench_render(c: &mut Criterion) {
    let scene = sample_scene(7, &SceneConfig::default()).unwrap();
    let cam = CameraConfig::default();
    let (pose, intr) = place_cameras(&scene, 1, &cam, 7).unwrap()[0];
    let mut group = c.benchmark_group("render_view");
    for (name, pool) in modes() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| run(&pool, || render_view(&scene, &pose, &intr))));
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let cfg = DataConfig {
        num_scenes: 4,
        num_eval: 1,
        ..DataConfig::default()
    };
    let mut group = c.benchmark_group("generate_4_scenes");
    group.sample_size(10);
    for (name, pool) in modes() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| run(&pool, || generate(&cfg).unwrap())));
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let scenes = generate(&DataConfig {
        num_scenes: 2,
        num_eval: 0,
        ..cfg.data.clone()
    })
    .unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, pool) in modes() {
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| run(&pool, || trainer.step(&scenes).unwrap().report.total))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_generate, bench_train_step);
criterion_main!(benches);
