//! Shared fixtures for the benchmarks.

use structprompt::eval::even_split;
use structprompt::model::{ModelConfig, ModelWeights};

/// A randomly initialised model with room for `context` tokens.
pub fn bench_model(context: usize, n_layers: usize) -> ModelWeights {
    ModelWeights::init_random(&ModelConfig {
        vocab_size: 64,
        d_model: 32,
        n_heads: 4,
        d_head: 8,
        n_layers,
        max_positions: context + 1,
        seed: 0,
    })
    .expect("valid config")
}

/// `total` tokens split evenly into `groups` runs, cycling over the vocabulary.
pub fn token_groups(total: usize, groups: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut next = 0u32;
    even_split(total, groups)
        .into_iter()
        .map(|n| {
            (0..n)
                .map(|_| {
                    next = (next * 31 + 7) % vocab as u32;
                    next
                })
                .collect()
        })
        .collect()
}
