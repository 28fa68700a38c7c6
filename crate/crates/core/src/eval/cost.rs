//! Attention score cost: analytic multiply-accumulate counts and timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{reset_score_macs, score_macs};
use crate::context::{encode_groups, AlignmentConfig, AlignmentStrategy, Provenance};
use crate::error::{Error, Result};
use crate::model::weights::Weights;
use crate::tensor::Real;

/// Score multiply-accumulates per layer. `t_g(t_g+1)/2` query-key pairs per
/// group, then each test token `i` scores `Σ t_g + i` keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub encode_pairs: u64,
    pub decode_pairs: u64,
    pub encode_macs: u64,
    pub decode_macs: u64,
}

impl CostEstimate {
    pub fn total_macs(&self) -> u64 {
        self.encode_macs + self.decode_macs
    }

    pub fn scaled(&self, n_layers: usize) -> Self {
        let n = n_layers as u64;
        CostEstimate {
            encode_pairs: self.encode_pairs * n,
            decode_pairs: self.decode_pairs * n,
            encode_macs: self.encode_macs * n,
            decode_macs: self.decode_macs * n,
        }
    }
}

pub fn measure_cost(token_counts: &[usize], len_test: usize, n_heads: usize, d_head: usize) -> CostEstimate {
    let encode_pairs: u64 = token_counts.iter().map(|&t| (t as u64) * (t as u64 + 1) / 2).sum();
    let context: u64 = token_counts.iter().map(|&t| t as u64).sum();
    let n = len_test as u64;
    let decode_pairs = n * context + n * (n + 1) / 2;
    let width = (n_heads * d_head) as u64;
    CostEstimate { encode_pairs, decode_pairs, encode_macs: encode_pairs * width, decode_macs: decode_pairs * width }
}

/// Entries of the full `t_g x t_g` score matrix summed over groups, the
/// quadratic term that grouping divides by `M`.
pub fn score_matrix_entries(token_counts: &[usize]) -> u64 {
    token_counts.iter().map(|&t| (t as u64) * (t as u64)).sum()
}

/// Even split of `total` tokens into `groups` parts, larger parts first.
pub fn even_split(total: usize, groups: usize) -> Vec<usize> {
    (0..groups).map(|g| total / groups + usize::from(g < total % groups)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeMeasurement {
    /// Analytic count over all layers.
    pub analytic_macs: u64,
    /// Count reported by the attention kernel.
    pub counted_macs: u64,
    pub wall_seconds: f64,
}

/// Encodes `groups` as independent blocks and reports the kernel's own MAC
/// count next to the analytic one. Each group is right-aligned to the longest.
pub fn measure_encode<F: Real>(weights: &Weights<F>, groups: &[Vec<u32>]) -> Result<EncodeMeasurement> {
    if groups.is_empty() {
        return Err(Error::BadGroupCount { demos: 0, groups: 0 });
    }
    let cfg = &weights.config;
    let alignment = AlignmentConfig::fit(groups, AlignmentStrategy::Truncate);
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let analytic = measure_cost(&counts, 0, cfg.n_heads, cfg.d_head).scaled(cfg.n_layers);
    reset_score_macs();
    let start = Instant::now();
    encode_groups(weights, groups, &alignment, Provenance::default())?;
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(EncodeMeasurement { analytic_macs: analytic.encode_macs, counted_macs: score_macs(), wall_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    #[test]
    fn even_split_ratio_is_one_over_m() {
        let one = measure_cost(&even_split(1024, 1), 0, 4, 16);
        let four = measure_cost(&even_split(1024, 4), 0, 4, 16);
        assert_eq!(one.encode_pairs, 1024 * 1025 / 2);
        assert_eq!(four.encode_pairs, 4 * 256 * 257 / 2);
        assert_eq!(even_split(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(4 * score_matrix_entries(&even_split(1024, 4)), score_matrix_entries(&[1024]));
    }

    #[test]
    fn single_group_matches_conventional_causal_count() {
        let t = 37usize;
        let len_test = 5;
        let c = measure_cost(&[t], len_test, 2, 3);
        let joint = t + len_test;
        assert_eq!(c.encode_pairs + c.decode_pairs, (joint * (joint + 1) / 2) as u64);
    }

    #[test]
    fn analytic_count_matches_instrumented_kernel() {
        let w = Weights::<f32>::init_random(&ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            n_layers: 3,
            max_positions: 40,
            seed: 1,
        })
        .unwrap();
        let groups = vec![vec![1, 5, 6, 7, 8, 2], vec![1, 9, 2], vec![1, 10, 5, 2]];
        let m = measure_encode(&w, &groups).unwrap();
        assert_eq!(m.analytic_macs, m.counted_macs);
        assert!(m.wall_seconds >= 0.0);
    }
}
