//! Sequential vs rayon-backed execution for the two batch-heavy stages:
//! leakage gram extraction and bounded batches of model calls.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagevol::exec::Execution;
use tagevol::gateway::{ChatRequest, Gateway, MockBackend};
use tagevol::leakage::count_matches_with;
use tagevol::InstructionRecord;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn corpus(rng: &mut ChaCha8Rng, docs: usize, prefix: &str) -> Vec<InstructionRecord> {
    (0..docs)
        .map(|i| {
            let len = rng.random_range(20..120);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..400))).collect();
            InstructionRecord::new(format!("{prefix}{i}"), words.join(" "))
        })
        .collect()
}

fn leakage(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let synth = corpus(&mut rng, 4000, "s");
    let bench = corpus(&mut rng, 1000, "b");
    let mut group = c.benchmark_group("leakage_8gram");
    group.sample_size(10);
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| black_box(count_matches_with("bench", &synth, &bench, 8, exec)))
        });
    }
    group.finish();
}

fn model_calls(c: &mut Criterion) {
    let requests: Vec<ChatRequest> = (0..64).map(|i| ChatRequest::user("m", format!("prompt {i}"), 0.7, 256)).collect();
    let mut group = c.benchmark_group("complete_batch_2ms_latency");
    group.sample_size(10);
    for exec in MODES {
        let mock = MockBackend::new().with_latency(|_| Duration::from_millis(2));
        for r in &requests {
            mock.register(r.prompt_key(), "reply");
        }
        let gateway = Gateway::new(mock).with_execution(exec);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, _| {
            b.iter(|| black_box(gateway.complete_batch(&requests, 8)))
        });
    }
    group.finish();
}

criterion_group!(benches, leakage, model_calls);
criterion_main!(benches);
