//! Hot-path benchmarks: matmul kernels and whole training steps.
//!
//! Each matmul size benches the dispatching kernel against its sequential
//! twin, so a default build shows what the rayon split buys (or costs) at
//! that size. To compare whole builds instead, save a baseline and rerun
//! without the parallel feature:
//!
//! ```text
//! cargo bench -p tfs-core -- --save-baseline parallel
//! cargo bench -p tfs-core --no-default-features -- --baseline parallel
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfs_core::data::{Example, Label, MetricKind, TaskFamily, TaskKind};
use tfs_core::model::{
    init_model, stage_model, EncodedBatch, EncoderConfig, HeadKind, Model,
};
use tfs_core::objectives::supervised_loss;
use tfs_core::tensor::linalg::{mm_nn, mm_nn_seq};
use tfs_core::tensor::{adam_step, AdamConfig, AdamState, Graph};

fn filled(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Square `n x n x n` products straddling the parallel dispatch threshold
/// (65536 multiplies): 16 stays sequential either way, 48 and 96 split
/// across rayon tasks when the feature is on.
fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul_nn");
    for &n in &[16usize, 48, 96] {
        let a = filled(n * n, &mut rng);
        let b = filled(n * n, &mut rng);
        let mut out = vec![0.0; n * n];
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("dispatch", n), &n, |bench, &n| {
            bench.iter(|| mm_nn(black_box(&a), black_box(&b), n, n, n, &mut out));
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, &n| {
            bench.iter(|| mm_nn_seq(black_box(&a), black_box(&b), n, n, n, &mut out));
        });
    }
    group.finish();
}

fn bench_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 64,
        hidden_size: 32,
        num_layers: 2,
        num_heads: 4,
        ff_size: 64,
        max_positions: 16,
        dropout: 0.0,
    }
}

fn bench_batch(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> (EncodedBatch, Vec<Label>) {
    let examples: Vec<Example> = (0..8)
        .map(|id| Example {
            id,
            segment_a: (0..12).map(|_| rng.gen_range(5..64)).collect(),
            segment_b: None,
            word_boundaries: vec![],
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let labels = (0..8).map(|i| Label::Class(i % 2)).collect();
    (EncodedBatch::build(&refs, config).unwrap(), labels)
}

/// Stage, encode, and score one classification batch: the inference-side
/// unit of work in evaluation and pseudo-labeling.
fn bench_encoder_forward(c: &mut Criterion) {
    let config = bench_config();
    let task =
        TaskKind::new(TaskFamily::SingleSentenceClassification, 2, MetricKind::Accuracy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, labels) = bench_batch(&config, &mut rng);
    let model = Model::from_checkpoint(&init_model(&config, &[HeadKind::for_task(&task)], 7).unwrap());

    c.bench_function("encoder_forward_batch8", |bench| {
        bench.iter(|| {
            let mut graph = Graph::new();
            let params = stage_model(&mut graph, &model, false).unwrap();
            let loss =
                supervised_loss(&mut graph, &params, &config, &task, &batch, &labels, None)
                    .unwrap();
            black_box(graph.value(loss)[0])
        });
    });
}

/// Forward, reverse sweep, and one Adam update: the training-side unit of
/// work every epoch of every regime is made of.
fn bench_training_step(c: &mut Criterion) {
    let config = bench_config();
    let task =
        TaskKind::new(TaskFamily::SingleSentenceClassification, 2, MetricKind::Accuracy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (batch, labels) = bench_batch(&config, &mut rng);
    let ckpt = init_model(&config, &[HeadKind::for_task(&task)], 11).unwrap();
    let names: Vec<String> = ckpt.params.keys().cloned().collect();
    let mut tensors: Vec<_> = ckpt.params.values().cloned().collect();
    let mut adam = AdamState::for_params(AdamConfig::default(), &tensors).unwrap();

    c.bench_function("training_step_batch8", |bench| {
        bench.iter(|| {
            let mut graph = Graph::new();
            let ids: Vec<_> = tensors
                .iter()
                .map(|t| graph.from_tensor(t, true).unwrap())
                .collect();
            let params = names.iter().cloned().zip(ids.iter().copied()).collect();
            let loss =
                supervised_loss(&mut graph, &params, &config, &task, &batch, &labels, None)
                    .unwrap();
            graph.backward(loss).unwrap();
            for (id, tensor) in ids.iter().zip(&mut tensors) {
                tensor.set_grad(graph.grad(*id).unwrap().to_vec()).unwrap();
            }
            adam_step(&mut tensors, &mut adam).unwrap();
            black_box(graph.value(loss)[0])
        });
    });
}

criterion_group!(benches, bench_matmul, bench_encoder_forward, bench_training_step);
criterion_main!(benches);
