//! Sequential against pooled execution on the two data-parallel workloads:
//! guided-masking evaluation and batch gradients.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vlprobe::exec::Executor;
use vlprobe::lexicon::Lexicon;
use vlprobe::model::train::{train, TrainConfig};
use vlprobe::model::{ToyBackend, ToyConfig, ToyModelParams};
use vlprobe::probing::{run_guided_masking, ProbeConfig};
use vlprobe::synthetic::{generate_synthetic_corpus, SyntheticCorpusSpec};

fn executors() -> Vec<(String, Executor)> {
    let mut out = vec![("sequential".to_string(), Executor::sequential())];
    let n = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    let pooled = Executor::new(n).expect("executor");
    if pooled.is_parallel() {
        out.push((format!("pool-{}", pooled.workers()), pooled));
    }
    out
}

fn bench(c: &mut Criterion) {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_samples: 256,
        ..Default::default()
    })
    .expect("corpus");
    let config = ToyConfig::reference(corpus.vocab.len());
    let params = ToyModelParams::init(config, 0).expect("init");
    let backend = ToyBackend::new(params.clone(), corpus.vocab.clone()).expect("backend");
    let lexicon = Lexicon::english();
    let probe = ProbeConfig::default();

    let mut group = c.benchmark_group("guided_masking_256");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| run_guided_masking(&corpus.samples, &backend, &probe, &lexicon, &exec).expect("run"))
        });
    }
    group.finish();

    let cfg = TrainConfig {
        steps: 5,
        ..Default::default()
    };
    let mut group = c.benchmark_group("train_5_steps");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| train(params.clone(), &corpus.samples, &cfg, &exec).expect("train"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
