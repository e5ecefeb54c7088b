use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use retopo::model::Model;
use retopo::par;
use retopo::synth::{generate_dataset, LabelPolicy, SceneConfig};
use retopo::topology::TopologySchema;
use retopo::train::{batch_gradients, ExperimentConfig};

fn modes() -> Vec<(&'static str, bool)> {
    let mut m = vec![("sequential", false)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", true));
    }
    m
}

fn generation(c: &mut Criterion) {
    let schema = TopologySchema::retina_default();
    let scene = SceneConfig::default();
    let mut group = c.benchmark_group("generate_16_scans");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| generate_dataset(7, 16, &scene, &schema, LabelPolicy::Partial, None).unwrap());
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn batch_step(c: &mut Criterion) {
    let schema = TopologySchema::retina_default();
    let cfg = ExperimentConfig { widths: vec![8, 16, 32], ..ExperimentConfig::default() };
    let model = Model::new(cfg.model_config(&schema), 1).unwrap();
    let batch = generate_dataset(11, 8, &cfg.scene, &schema, LabelPolicy::Partial, None).unwrap();
    let mut group = c.benchmark_group("batch_gradients_8");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| batch_gradients(&model, &cfg, &schema, &batch, 3).unwrap());
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, generation, batch_step);
criterion_main!(benches);
