use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use structprompt::context::{encode_groups, AlignmentConfig, AlignmentStrategy, Provenance};
use structprompt_bench::{bench_model, token_groups};

fn encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode_groups");
    group.sample_size(10);
    for &total in &[512usize, 2048] {
        let weights = bench_model(total, 4);
        for &m in &[1usize, 2, 4, 8] {
            let groups = token_groups(total, m, weights.config.vocab_size);
            let alignment = AlignmentConfig::fit(&groups, AlignmentStrategy::Truncate);
            group.bench_with_input(BenchmarkId::new(format!("tokens{total}"), m), &groups, |b, groups| {
                b.iter(|| encode_groups(&weights, black_box(groups), &alignment, Provenance::default()).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, encode);
criterion_main!(benches);
