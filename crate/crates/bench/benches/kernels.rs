use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use localist_core::attention::attend;
use localist_core::dial::preset;
use localist_core::recruit::{recruit_block, TokenAttention};
use localist_core::spectral::spectral_clusters;
use localist_core::synth::generate;
use localist_core::trainer::{resume, task_gradient, ModelShape, Objective};
use localist_core::{AttentionModel, BlockPartition, GeneratorSpec, PenaltyConfig, TrainOptions, TrainState};
use std::hint::black_box;

fn spec(n: usize) -> GeneratorSpec {
    GeneratorSpec {
        n,
        num_blocks: 4,
        anchors_per_block: 2,
        num_sequences: 8,
        ..GeneratorSpec::default()
    }
}

fn bench_attend(c: &mut Criterion) {
    let mut group = c.benchmark_group("attend");
    for n in [16, 64, 256] {
        let s = spec(n);
        let batch = generate(&s).unwrap();
        let head = s.identity_head(0.5).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &batch.embeddings[0], |b, x| {
            b.iter(|| attend(black_box(x), &head).unwrap())
        });
    }
    group.finish();
}

fn model_and_objective(s: &GeneratorSpec) -> (localist_core::LabeledBatch, AttentionModel, Objective) {
    let batch = generate(s).unwrap();
    let shape = ModelShape {
        d_model: s.d_model,
        num_blocks: s.num_blocks,
        num_classes: batch.num_classes,
        ..ModelShape::default()
    };
    let model = AttentionModel::random(&shape, 1).unwrap();
    let obj = Objective::new(PenaltyConfig::uniform(shape.num_heads, s.num_blocks, 1.0, 1e-3, shape.tau));
    (batch, model, obj)
}

fn bench_training(c: &mut Criterion) {
    let (batch, model, obj) = model_and_objective(&spec(16));
    c.bench_function("task_gradient/n16x8", |b| {
        b.iter(|| task_gradient(black_box(&model), &batch, &obj).unwrap())
    });
    let opts = TrainOptions {
        max_iters: 10,
        tol: 1e-300,
        ..TrainOptions::default()
    };
    c.bench_function("resume/10_steps", |b| {
        b.iter(|| resume(TrainState::new(model.clone()), &batch, &obj, &opts).unwrap())
    });
}

fn bench_recruitment(c: &mut Criterion) {
    let s = spec(64);
    let batch = generate(&s).unwrap();
    let attn = TokenAttention::from_head(&batch.embeddings, &s.identity_head(0.5).unwrap()).unwrap();
    let rows: Vec<Vec<f64>> = attn.rows[0].iter().take(32).cloned().collect();
    c.bench_function("spectral_clusters/32", |b| b.iter(|| spectral_clusters(black_box(&rows))));
    let start = BlockPartition::single(s.n, vec![0]).unwrap();
    let dial = preset("localist").unwrap();
    c.bench_function("recruit_block/n64", |b| {
        b.iter(|| recruit_block(black_box(&attn), &start, &dial).unwrap())
    });
}

criterion_group!(benches, bench_attend, bench_training, bench_recruitment);
criterion_main!(benches);
