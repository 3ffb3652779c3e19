//! Sequential versus data-parallel execution for one training epoch and for
//! prediction over a test split.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mrc_ner::par::Execution;
use mrc_ner::synthetic::{self, SyntheticConfig};
use mrc_ner::train::{predict_sentences, train_model, TrainConfig};

fn bench(c: &mut Criterion) {
    let config = SyntheticConfig {
        sentences: 120,
        ..SyntheticConfig::default()
    };
    let train = synthetic::generate(&config).unwrap();
    let tags = synthetic::tag_set(&config).unwrap();
    let catalog = synthetic::sentinel_catalog(&config.types, config.variants);
    let vocab = synthetic::vocabulary(&config, &[]);
    let train_config = TrainConfig {
        epochs: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let trained = train_model(&train_config, &train, &tags, &catalog, &vocab, Execution::Parallel).unwrap();

    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new("train_epoch", name), &exec, |b, &exec| {
            b.iter(|| train_model(&train_config, &train, &tags, &catalog, &vocab, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("predict", name), &exec, |b, &exec| {
            b.iter(|| {
                predict_sentences(&trained.checkpoint, &tags, &catalog, &train, &Default::default(), exec).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
