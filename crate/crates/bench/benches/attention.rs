use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use structprompt::attention::{rescaled_attention, AttentionInputs, KvView};

const HEADS: usize = 4;
const D_HEAD: usize = 16;

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Test queries attending over `m` cached groups that together hold `context` keys.
fn attention(c: &mut Criterion) {
    let dm = HEADS * D_HEAD;
    let context = 1024;
    let len_test = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("rescaled_attention");
    for &m in &[1usize, 4, 16] {
        let per = context / m;
        let keys: Vec<Vec<f32>> = (0..m).map(|_| random(per * dm, &mut rng)).collect();
        let values: Vec<Vec<f32>> = (0..m).map(|_| random(per * dm, &mut rng)).collect();
        let valid = vec![true; per];
        let q = random(len_test * dm, &mut rng);
        let k = random(len_test * dm, &mut rng);
        let v = random(len_test * dm, &mut rng);
        let own_valid = vec![true; len_test];
        group.bench_function(BenchmarkId::from_parameter(m), |b| {
            b.iter(|| {
                let inputs = AttentionInputs {
                    n_heads: HEADS,
                    d_head: D_HEAD,
                    queries: &q,
                    context: (0..m).map(|g| KvView { keys: &keys[g], values: &values[g], valid: &valid }).collect(),
                    own: KvView { keys: &k, values: &v, valid: &own_valid },
                    query_offset: 0,
                    scale_factor: m as f64,
                };
                rescaled_attention(black_box(&inputs)).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
