use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use objmim::net::{ModelConfig, Params};
use objmim::objtok::{preprocess_masks, TokenizerBackend};
use objmim::par::{map_indexed_in, Exec};
use objmim::scenegen::{generate_dataset, generate_scenes, SceneSpec};
use objmim::trainer::{batch_gradient, TrainConfig, TrainData};

fn batch_gradients(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let scenes = generate_scenes(&spec, 16, 3).unwrap();
    let data = TrainData::from_scenes(&scenes, 8).unwrap();
    let model = ModelConfig::default();
    let params = Params::<f32>::init(&model).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let mut g = c.benchmark_group("batch_gradient_16");
    g.sample_size(10);
    for (name, cfg) in [("stage1", TrainConfig::stage1()), ("stage2", TrainConfig::stage2())] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            g.bench_with_input(BenchmarkId::new(name, format!("{exec:?}")), &exec, |b, &exec| {
                b.iter(|| {
                    batch_gradient(exec, &model, &params, &cfg, &data, data.all_annotations(), &idx, [0, 0]).unwrap()
                })
            });
        }
    }
    g.finish();
}

fn scene_generation(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let mut g = c.benchmark_group("generate_256_scenes");
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| map_indexed_in(exec, 256, |i| objmim::scenegen::sample_scene(&spec, i as u64).unwrap()))
        });
    }
    g.finish();
}

fn preprocessing(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    let manifest = generate_dataset(&spec, 64, 5, &dir.path().join("data")).unwrap();
    let mut g = c.benchmark_group("preprocess_64_connected_components");
    g.sample_size(10);
    g.bench_function("cold", |b| {
        b.iter_with_setup(
            || tempfile::tempdir().unwrap(),
            |cache| {
                preprocess_masks(
                    &manifest,
                    &dir.path().join("data"),
                    &TokenizerBackend::connected_components(),
                    cache.path(),
                )
                .unwrap()
            },
        )
    });
    g.finish();
}

criterion_group!(benches, batch_gradients, scene_generation, preprocessing);
criterion_main!(benches);
