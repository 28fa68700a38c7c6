//! Multi-head attention kernels.
//!
//! Activations are laid out `[tokens x n_heads x d_head]`, i.e. one row of
//! width `d_model` per token with head `h` in columns `h*d_head..(h+1)*d_head`.
//!
//! [`rescaled_attention`] lets a test sequence `x` attend to cached group
//! blocks plus its own causal prefix. Logits on `x` keys carry an additive
//! `ln(scale_factor)`, which multiplies their unnormalised weight by the
//! factor while keeping the max-subtracted softmax stable. Group keys are
//! visible to every query; masked keys receive exactly zero weight.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{dot, Real};

thread_local! {
    static SCORE_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates spent on query·key scores on this thread since the
/// last [`reset_score_macs`].
pub fn score_macs() -> u64 {
    SCORE_MACS.with(Cell::get)
}

pub fn reset_score_macs() {
    SCORE_MACS.with(|c| c.set(0));
}

fn count_macs(n: u64) {
    SCORE_MACS.with(|c| c.set(c.get() + n));
}

/// Keys, values and validity of a run of tokens.
#[derive(Clone, Copy, Debug)]
pub struct KvView<'a, F> {
    pub keys: &'a [F],
    pub values: &'a [F],
    pub valid: &'a [bool],
}

impl<F> KvView<'_, F> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionInputs<'a, F> {
    pub n_heads: usize,
    pub d_head: usize,
    /// Queries of the `x` tokens being computed, `[len_q x d_model]`.
    pub queries: &'a [F],
    /// Cached group blocks, visible to every query.
    pub context: Vec<KvView<'a, F>>,
    /// Keys and values of `x` itself. Query `i` sees entries `0..=query_offset + i`.
    pub own: KvView<'a, F>,
    pub query_offset: usize,
    pub scale_factor: f64,
}

impl<F: Real> AttentionInputs<'_, F> {
    fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    fn query_count(&self) -> usize {
        self.queries.len() / self.d_model().max(1)
    }

    fn context_len(&self) -> usize {
        self.context.iter().map(KvView::len).sum()
    }

    fn validate(&self) -> Result<()> {
        let dm = self.d_model();
        if dm == 0 {
            return Err(Error::ShapeMismatch("zero-width heads".into()));
        }
        if !(self.scale_factor.is_finite() && self.scale_factor >= 1.0) {
            return Err(Error::ShapeMismatch(format!("scale factor {} must be finite and >= 1", self.scale_factor)));
        }
        if !self.queries.len().is_multiple_of(dm) {
            return Err(Error::ShapeMismatch(format!(
                "queries hold {} values, not a multiple of d_model {dm}",
                self.queries.len()
            )));
        }
        let check = |what: &str, view: &KvView<'_, F>| {
            let n = view.len() * dm;
            if view.keys.len() != n || view.values.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{what}: {} keys / {} values for {} tokens of width {dm}",
                    view.keys.len(),
                    view.values.len(),
                    view.len()
                )));
            }
            Ok(())
        };
        for (g, block) in self.context.iter().enumerate() {
            check(&format!("group {g}"), block)?;
        }
        check("self", &self.own)?;
        if self.query_offset + self.query_count() > self.own.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} queries at offset {} exceed {} self entries",
                self.query_count(),
                self.query_offset,
                self.own.len()
            )));
        }
        Ok(())
    }
}

/// Rescaled attention over `[group blocks..., own causal prefix]`.
pub fn rescaled_attention<F: Real>(inputs: &AttentionInputs<'_, F>) -> Result<Vec<F>> {
    attend(inputs, None)
}

/// Same as [`rescaled_attention`] but also returns the normalised weights,
/// laid out `[len_q x n_heads x (context_len + own_len)]` with zeros for keys
/// a query cannot see.
pub fn rescaled_attention_with_weights<F: Real>(inputs: &AttentionInputs<'_, F>) -> Result<(Vec<F>, Vec<F>)> {
    let mut weights = Vec::new();
    let out = attend(inputs, Some(&mut weights))?;
    Ok((out, weights))
}

/// Plain causal self-attention with a key validity mask.
pub fn causal_attention<F: Real>(
    queries: &[F],
    keys: &[F],
    values: &[F],
    valid: &[bool],
    n_heads: usize,
    d_head: usize,
) -> Result<Vec<F>> {
    rescaled_attention(&AttentionInputs {
        n_heads,
        d_head,
        queries,
        context: Vec::new(),
        own: KvView { keys, values, valid },
        query_offset: 0,
        scale_factor: 1.0,
    })
}

fn attend<F: Real>(inputs: &AttentionInputs<'_, F>, mut sink: Option<&mut Vec<F>>) -> Result<Vec<F>> {
    inputs.validate()?;
    let dm = inputs.d_model();
    let dh = inputs.d_head;
    let len_q = inputs.query_count();
    let ctx_len = inputs.context_len();
    let own_len = inputs.own.len();
    let row_width = ctx_len + own_len;
    let inv_sqrt_d = F::one() / F::from_usize(dh).unwrap().sqrt();
    let log_scale = F::from_f64_lossy(inputs.scale_factor.ln());

    let mut out = vec![F::zero(); len_q * dm];
    if let Some(w) = sink.as_deref_mut() {
        w.clear();
        w.resize(len_q * inputs.n_heads * row_width, F::zero());
    }
    let mut scores = vec![F::zero(); row_width];
    let mut visible = vec![false; row_width];
    let mut macs = 0u64;

    for i in 0..len_q {
        let own_visible = inputs.query_offset + i + 1;
        let query_valid = inputs.own.valid[inputs.query_offset + i];
        for h in 0..inputs.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let q = &inputs.queries[i * dm..][cols.clone()];
            let mut slot = 0;
            for block in &inputs.context {
                for j in 0..block.len() {
                    scores[slot] = dot(q, &block.keys[j * dm..][cols.clone()]) * inv_sqrt_d;
                    visible[slot] = block.valid[j];
                    slot += 1;
                }
            }
            for j in 0..own_len {
                if j < own_visible {
                    scores[slot] = dot(q, &inputs.own.keys[j * dm..][cols.clone()]) * inv_sqrt_d + log_scale;
                    visible[slot] = inputs.own.valid[j];
                } else {
                    visible[slot] = false;
                }
                slot += 1;
            }
            macs += ((ctx_len + own_visible) * dh) as u64;

            let max = scores.iter().zip(&visible).filter(|(_, &v)| v).map(|(s, _)| *s).fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                if query_valid {
                    count_macs(macs);
                    return Err(Error::NoValidKey { row: i });
                }
                // padding query with nothing to look at: output stays zero
                continue;
            }
            let mut total = F::zero();
            for (s, &v) in scores.iter_mut().zip(&visible) {
                *s = if v { (*s - max).exp() } else { F::zero() };
                total += *s;
            }
            let inv_total = F::one() / total;
            let dst = &mut out[i * dm..][cols.clone()];
            let mut slot = 0;
            let blocks = inputs.context.iter().chain(std::iter::once(&inputs.own));
            for block in blocks {
                for j in 0..block.len() {
                    let w = scores[slot] * inv_total;
                    scores[slot] = w;
                    if w != F::zero() {
                        let v = &block.values[j * dm..][cols.clone()];
                        for (o, x) in dst.iter_mut().zip(v) {
                            *o += w * *x;
                        }
                    }
                    slot += 1;
                }
            }
            if let Some(wts) = sink.as_deref_mut() {
                let base = (i * inputs.n_heads + h) * row_width;
                wts[base..base + row_width].copy_from_slice(&scores);
            }
        }
    }
    count_macs(macs);
    Ok(out)
}

/// Running keys/values of the sequence being decoded, for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfCache<F> {
    pub layer: usize,
    pub keys: Vec<F>,
    pub values: Vec<F>,
    pub valid: Vec<bool>,
}

impl<F> SelfCache<F> {
    pub fn new(layer: usize) -> Self {
        Self { layer, keys: Vec::new(), values: Vec::new(), valid: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn view(&self) -> KvView<'_, F> {
        KvView { keys: &self.keys, values: &self.values, valid: &self.valid }
    }
}

/// One decoding step: appends the new token's key/value to `cache` and
/// returns its attention output. Generated tokens belong to `x`, so they
/// receive the scale factor like the rest of the test input.
#[allow(clippy::too_many_arguments)]
pub fn incremental_rescaled_attention<F: Real>(
    context: &[KvView<'_, F>],
    cache: &mut SelfCache<F>,
    layer: usize,
    n_heads: usize,
    d_head: usize,
    query: &[F],
    key: &[F],
    value: &[F],
    scale_factor: f64,
) -> Result<Vec<F>> {
    if cache.layer != layer {
        return Err(Error::CacheLayerMismatch { expected: layer, found: cache.layer });
    }
    let dm = n_heads * d_head;
    if query.len() != dm || key.len() != dm || value.len() != dm {
        return Err(Error::ShapeMismatch(format!("step vectors must have width {dm}")));
    }
    cache.keys.extend_from_slice(key);
    cache.values.extend_from_slice(value);
    cache.valid.push(true);
    rescaled_attention(&AttentionInputs {
        n_heads,
        d_head,
        queries: query,
        context: context.to_vec(),
        own: cache.view(),
        query_offset: cache.len() - 1,
        scale_factor,
    })
}
