use serde::{Deserialize, Serialize};

use super::weights::Weights;
use crate::attention::{rescaled_attention, AttentionInputs, KvView, SelfCache};
use crate::context::GroupedContext;
use crate::error::{Error, Result};
use crate::tensor::{add_bias, gelu, layer_norm, matmul, matmul_bt, Real};

/// Token ids with explicit 1-based positions and a validity mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, positions: Vec<usize>, valid: Vec<bool>) -> Result<Self> {
        let seq = Self { tokens, positions, valid };
        seq.check_lengths()?;
        Ok(seq)
    }

    /// All-valid tokens at positions `start, start+1, ...`.
    pub fn contiguous(tokens: Vec<u32>, start: usize) -> Self {
        let n = tokens.len();
        Self { tokens, positions: (start..start + n).collect(), valid: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check_lengths(&self) -> Result<()> {
        if self.tokens.len() != self.positions.len() || self.tokens.len() != self.valid.len() {
            return Err(Error::InvalidSequence(format!(
                "{} tokens, {} positions, {} mask entries",
                self.tokens.len(),
                self.positions.len(),
                self.valid.len()
            )));
        }
        Ok(())
    }

    /// Positions inside `[1, max_positions]`, strictly increasing over valid entries.
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        self.check_lengths()?;
        check_positions(&self.positions, &self.valid, None, max_positions)
    }
}

fn check_positions(positions: &[usize], valid: &[bool], mut last: Option<usize>, max_positions: usize) -> Result<()> {
    for (&p, &v) in positions.iter().zip(valid) {
        if p == 0 || p > max_positions {
            return Err(Error::PositionOverflow { position: p, max_positions });
        }
        if v {
            if last.is_some_and(|prev| p <= prev) {
                return Err(Error::InvalidSequence(format!("position {p} does not increase past {}", last.unwrap())));
            }
            last = Some(p);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<F> {
    pub keys: Vec<F>,
    pub values: Vec<F>,
}

/// Cacheable per-layer keys and values of one encoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct KvBlock<F> {
    pub layers: Vec<LayerKv<F>>,
    pub positions: Vec<usize>,
    pub valid: Vec<bool>,
}

impl<F> KvBlock<F> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn view(&self, layer: usize) -> KvView<'_, F> {
        KvView { keys: &self.layers[layer].keys, values: &self.layers[layer].values, valid: &self.valid }
    }

    /// Largest position among valid entries.
    pub fn max_valid_position(&self) -> Option<usize> {
        self.positions.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(&p, _)| p).max()
    }
}

/// Per-layer self caches of a sequence being decoded incrementally.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState<F> {
    pub caches: Vec<SelfCache<F>>,
    pub positions: Vec<usize>,
}

impl<F> DecodeState<F> {
    pub fn new(n_layers: usize) -> Self {
        Self { caches: (0..n_layers).map(SelfCache::new).collect(), positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.iter().zip(&self.caches[0].valid).filter(|(_, &v)| v).map(|(&p, _)| p).next_back()
    }

    pub fn into_block(self) -> KvBlock<F> {
        let valid = self.caches.first().map(|c| c.valid.clone()).unwrap_or_default();
        KvBlock {
            layers: self.caches.into_iter().map(|c| LayerKv { keys: c.keys, values: c.values }).collect(),
            positions: self.positions,
            valid,
        }
    }
}

pub struct ForwardOutput<F> {
    /// Next-token logits, `[len x vocab_size]`.
    pub logits: Vec<F>,
    pub self_kv: KvBlock<F>,
}

/// Full forward pass of `seq`, optionally attending a grouped context with
/// rescaled attention.
pub fn forward<F: Real>(
    weights: &Weights<F>,
    seq: &TokenSequence,
    external: Option<&GroupedContext<F>>,
    scale_factor: f64,
) -> Result<ForwardOutput<F>> {
    let blocks = external.map(|c| c.blocks.as_slice()).unwrap_or(&[]);
    let mut state = DecodeState::new(weights.config.n_layers);
    let logits = forward_step(weights, seq, blocks, &mut state, scale_factor)?;
    Ok(ForwardOutput { logits, self_kv: state.into_block() })
}

/// Runs `seq` as the continuation of whatever `state` already holds,
/// appending its keys and values. Returns logits for the new tokens only.
pub fn forward_step<F: Real>(
    weights: &Weights<F>,
    seq: &TokenSequence,
    context: &[KvBlock<F>],
    state: &mut DecodeState<F>,
    scale_factor: f64,
) -> Result<Vec<F>> {
    let cfg = &weights.config;
    let dm = cfg.d_model;
    let n = seq.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    seq.check_lengths()?;
    check_positions(&seq.positions, &seq.valid, state.last_position(), cfg.max_positions)?;
    if state.caches.len() != cfg.n_layers {
        return Err(Error::ShapeMismatch(format!(
            "decode state has {} layers, model has {}",
            state.caches.len(),
            cfg.n_layers
        )));
    }
    check_context(weights, context, seq, state)?;
    for &t in &seq.tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: cfg.vocab_size });
        }
    }

    let mut h = vec![F::zero(); n * dm];
    for (i, (&tok, &pos)) in seq.tokens.iter().zip(&seq.positions).enumerate() {
        let te = &weights.token_embedding[tok as usize * dm..][..dm];
        let pe = &weights.position_embedding[(pos - 1) * dm..][..dm];
        for ((dst, a), b) in h[i * dm..][..dm].iter_mut().zip(te).zip(pe) {
            *dst = *a + *b;
        }
    }

    for (l, layer) in weights.layers.iter().enumerate() {
        let (a, _, _) = layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias);
        let project = |w: &[F], b: &[F]| {
            let mut out = matmul(&a, w, n, dm, dm);
            add_bias(&mut out, b);
            out
        };
        let q = project(&layer.wq, &layer.bq);
        let k = project(&layer.wk, &layer.bk);
        let v = project(&layer.wv, &layer.bv);

        let cache = &mut state.caches[l];
        if cache.layer != l {
            return Err(Error::CacheLayerMismatch { expected: l, found: cache.layer });
        }
        let offset = cache.len();
        cache.keys.extend_from_slice(&k);
        cache.values.extend_from_slice(&v);
        cache.valid.extend_from_slice(&seq.valid);

        let attn = rescaled_attention(&AttentionInputs {
            n_heads: cfg.n_heads,
            d_head: cfg.d_head,
            queries: &q,
            context: context.iter().map(|b| b.view(l)).collect(),
            own: cache.view(),
            query_offset: offset,
            scale_factor,
        })?;
        let mut proj = matmul(&attn, &layer.wo, n, dm, dm);
        add_bias(&mut proj, &layer.bo);
        for (x, p) in h.iter_mut().zip(&proj) {
            *x += *p;
        }

        let (m, _, _) = layer_norm(&h, &layer.ln2_gain, &layer.ln2_bias);
        let dff = cfg.d_ff();
        let mut u = matmul(&m, &layer.w_up, n, dm, dff);
        add_bias(&mut u, &layer.b_up);
        u.iter_mut().for_each(|x| *x = gelu(*x));
        let mut down = matmul(&u, &layer.w_down, n, dff, dm);
        add_bias(&mut down, &layer.b_down);
        for (x, p) in h.iter_mut().zip(&down) {
            *x += *p;
        }
    }
    state.positions.extend_from_slice(&seq.positions);

    let (f, _, _) = layer_norm(&h, &weights.final_gain, &weights.final_bias);
    Ok(matmul_bt(&f, &weights.token_embedding, n, dm, cfg.vocab_size))
}

fn check_context<F: Real>(
    weights: &Weights<F>,
    context: &[KvBlock<F>],
    seq: &TokenSequence,
    state: &DecodeState<F>,
) -> Result<()> {
    let cfg = &weights.config;
    let mut ctx_max = 0;
    for (g, block) in context.iter().enumerate() {
        if block.layers.len() != cfg.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "group {g} caches {} layers, model has {}",
                block.layers.len(),
                cfg.n_layers
            )));
        }
        for layer in &block.layers {
            if layer.keys.len() != block.len() * cfg.d_model || layer.values.len() != block.len() * cfg.d_model {
                return Err(Error::ShapeMismatch(format!(
                    "group {g} key/value width does not match d_model {}",
                    cfg.d_model
                )));
            }
        }
        ctx_max = ctx_max.max(block.max_valid_position().unwrap_or(0));
    }
    let first =
        state.positions.first().copied().into_iter().chain(seq.positions.iter().copied()).min().unwrap_or(usize::MAX);
    if !context.is_empty() && ctx_max >= first {
        return Err(Error::InvalidSequence(format!(
            "test input starts at position {first} but the context reaches {ctx_max}"
        )));
    }
    Ok(())
}
