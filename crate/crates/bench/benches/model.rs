use ceci_bench::desk_dataset;
use ceci_core::model::{batch_examples, train};
use ceci_core::tensor::masked_mse;
use ceci_core::{CeciConfig, Example, Model};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_config(epochs: usize) -> CeciConfig {
    let mut config = CeciConfig::from_toml_str(include_str!("../../core/configs/desk/model.toml")).unwrap();
    config.epochs = epochs;
    config
}

fn forward_backward(c: &mut Criterion) {
    let (ontology, data) = desk_dataset(60, 1);
    let examples: Vec<&Example> = data.examples.iter().take(50).collect();
    let batch = batch_examples(&examples, &ontology).unwrap();
    let mut model = Model::new(desk_config(1), &ontology).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    c.bench_function("infer batch of 50", |b| b.iter(|| model.infer(&batch).unwrap()));
    c.bench_function("forward+backward batch of 50", |b| {
        b.iter(|| {
            let out = model.forward_train(&batch, &mut rng).unwrap();
            let (_, grad) = masked_mse(&out, &batch.targets, &batch.mask).unwrap();
            model.backward(&batch.adjacency, &grad).unwrap();
        })
    });
}

fn train_epoch(c: &mut Criterion) {
    let (ontology, data) = desk_dataset(300, 7);
    let config = desk_config(1);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one desk epoch", |b| b.iter(|| train(&config, &ontology, &data).unwrap()));
    group.finish();
}

criterion_group!(benches, forward_backward, train_epoch);
criterion_main!(benches);
