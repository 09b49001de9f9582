//! Sequential versus data-parallel execution of a training step and of
//! batched generation. Build with `--no-default-features` to measure the
//! fallback path on both arms.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bar_core::bitcodec::index_to_bits;
use bar_core::exec::Exec;
use bar_core::harness::Sequence;
use bar_core::model::{BarModel, HeadKind, ModelConfig};
use bar_core::sampler::{generate_many, SampleConfig};
use bar_core::trainer::{TrainConfig, Trainer};

fn model_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 32,
        ffn_width: 64,
        heads: 2,
        bits: 8,
        head_kind: HeadKind::Mbm,
        head_layers: 2,
        head_width: 32,
        class_count: 4,
        context_len: 8,
        class_repeat: 1,
    }
}

const ARMS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn train_step(c: &mut Criterion) {
    let batch: Vec<Sequence> = (0..16u64)
        .map(|i| Sequence {
            class: (i % 4) as usize,
            tokens: (0..8).map(|t| index_to_bits((i * 31 + t * 7) % 256, 8).unwrap()).collect(),
        })
        .collect();
    let mut group = c.benchmark_group("train_step");
    for (name, exec) in ARMS {
        let mut trainer = Trainer::new(BarModel::new(model_config(), 0).unwrap(), TrainConfig::default(), 1_000_000).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| trainer.train_step(&batch, exec).unwrap()));
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let model = BarModel::new(model_config(), 1).unwrap();
    let cfg = SampleConfig::guided(8).unwrap();
    let classes: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let mut group = c.benchmark_group("generate_many");
    for (name, exec) in ARMS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_many(&model, &classes, 8, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = train_step, generation
}
criterion_main!(benches);
