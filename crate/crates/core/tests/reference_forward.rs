//! The engine's forward pass against a straight-line reference written with
//! plain loops, plus causality of the logits.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use structprompt::model::{forward, ModelConfig, ModelWeights, TokenSequence, Weights};

fn random_model(seed: u64, cfg: ModelConfig) -> Weights<f64> {
    let mut w: Weights<f64> = ModelWeights::init_random(&cfg).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.2).unwrap();
    for t in w.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    w
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / (var + 1e-5).sqrt() * g + b).collect()
}

/// Row vector times an `in x out` matrix, plus bias.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_logits(w: &Weights<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &w.config;
    let d = c.d_model;
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..d).map(|k| w.token_embedding[t as usize * d + k] + w.position_embedding[i * d + k]).collect()
        })
        .collect();
    for layer in &w.layers {
        let a: Vec<Vec<f64>> = h.iter().map(|x| norm(x, &layer.ln1_gain, &layer.ln1_bias)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|x| affine(x, &layer.wq, &layer.bq)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|x| affine(x, &layer.wk, &layer.bk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| affine(x, &layer.wv, &layer.bv)).collect();
        for i in 0..tokens.len() {
            let mut mixed = vec![0.0; d];
            for head in 0..c.n_heads {
                let r = head * c.d_head..(head + 1) * c.d_head;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| r.clone().map(|x| q[i][x] * k[j][x]).sum::<f64>() / (c.d_head as f64).sqrt())
                    .collect();
                let top = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for x in r.clone() {
                        mixed[x] += ej / z * v[j][x];
                    }
                }
            }
            let o = affine(&mixed, &layer.wo, &layer.bo);
            h[i].iter_mut().zip(&o).for_each(|(x, y)| *x += y);
        }
        for x in h.iter_mut() {
            let m = norm(x, &layer.ln2_gain, &layer.ln2_bias);
            let u: Vec<f64> = affine(&m, &layer.w_up, &layer.b_up).into_iter().map(gelu).collect();
            let down = affine(&u, &layer.w_down, &layer.b_down);
            x.iter_mut().zip(&down).for_each(|(x, y)| *x += y);
        }
    }
    h.iter()
        .map(|x| {
            let f = norm(x, &w.final_gain, &w.final_bias);
            (0..c.vocab_size).map(|t| (0..d).map(|k| f[k] * w.token_embedding[t * d + k]).sum()).collect()
        })
        .collect()
}

#[test]
fn forward_matches_straight_line_reference() {
    let shapes = [(11, 2, 3, 1), (17, 3, 4, 2), (9, 4, 2, 3)];
    for (seed, &(vocab, heads, d_head, layers)) in shapes.iter().enumerate() {
        let cfg = ModelConfig {
            vocab_size: vocab,
            d_model: heads * d_head,
            n_heads: heads,
            d_head,
            n_layers: layers,
            max_positions: 24,
            seed: seed as u64,
        };
        let w = random_model(seed as u64, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let tokens: Vec<u32> = (0..13).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let got = forward(&w, &TokenSequence::contiguous(tokens.clone(), 1), None, 1.0).unwrap().logits;
        let want = reference_logits(&w, &tokens);
        for (row, expect) in got.chunks(vocab).zip(&want) {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logits_ignore_later_tokens(
        seed in any::<u64>(),
        tokens in proptest::collection::vec(0u32..12, 2..16),
        cut in 1usize..15,
        replacement in 0u32..12,
    ) {
        let cut = cut.min(tokens.len() - 1);
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_heads: 2, d_head: 4, n_layers: 2, max_positions: 16, seed };
        let w = random_model(seed, cfg);
        let mut changed = tokens.clone();
        changed[cut] = replacement;
        let a = forward(&w, &TokenSequence::contiguous(tokens, 1), None, 1.0).unwrap().logits;
        let b = forward(&w, &TokenSequence::contiguous(changed, 1), None, 1.0).unwrap().logits;
        prop_assert_eq!(&a[..cut * 12], &b[..cut * 12]);
    }
}
