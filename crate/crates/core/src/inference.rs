//! Prompting pipelines: completion log-probabilities, candidate scoring and
//! beam-search generation, under either the concatenated baseline or a
//! grouped context with rescaled attention.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::context::{test_positions, GroupedContext};
use crate::error::{Error, Result};
use crate::model::forward::{forward, forward_step, DecodeState, KvBlock, TokenSequence};
use crate::model::tokenizer::{Vocab, DELIM};
use crate::model::weights::Weights;
use crate::tensor::{log_softmax, Real};

/// What the test input is conditioned on.
#[derive(Clone, Copy, Debug)]
pub enum Prompt<'a, F> {
    /// Context tokens placed directly before the test input at positions `1..`.
    Conventional { context: &'a [u32] },
    /// Independently encoded groups; the test input starts at `L+1`.
    Structured { context: &'a GroupedContext<F>, scale_factor: f64 },
}

impl<'a, F: Real> Prompt<'a, F> {
    fn blocks(&self) -> &'a [KvBlock<F>] {
        match self {
            Prompt::Conventional { .. } => &[],
            Prompt::Structured { context, .. } => &context.blocks,
        }
    }

    fn scale_factor(&self) -> f64 {
        match self {
            Prompt::Conventional { .. } => 1.0,
            Prompt::Structured { scale_factor, .. } => *scale_factor,
        }
    }

    /// Runs the prompt and `prefix`, returning the decode state and the
    /// next-token log-probabilities after the last prefix token.
    fn prime(&self, weights: &Weights<F>, prefix: &[u32]) -> Result<(DecodeState<F>, Vec<f64>)> {
        let vocab = weights.config.vocab_size;
        let max = weights.config.max_positions;
        let seq = match self {
            Prompt::Conventional { context } => {
                let tokens: Vec<u32> = context.iter().chain(prefix).copied().collect();
                if tokens.len() > max {
                    return Err(Error::WindowOverflow { needed: tokens.len(), max_positions: max });
                }
                TokenSequence::contiguous(tokens, 1)
            }
            Prompt::Structured { context, .. } => {
                let positions = test_positions(&context.alignment, prefix.len(), max)?;
                TokenSequence { tokens: prefix.to_vec(), positions, valid: vec![true; prefix.len()] }
            }
        };
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut state = DecodeState::new(weights.config.n_layers);
        let logits = forward_step(weights, &seq, self.blocks(), &mut state, self.scale_factor())?;
        let last = log_softmax(&logits[logits.len() - vocab..]);
        Ok((state, last))
    }

    /// Feeds one more token, returning the following log-probabilities.
    fn extend(&self, weights: &Weights<F>, state: &mut DecodeState<F>, token: u32) -> Result<Vec<f64>> {
        let position = state.last_position().unwrap_or(0) + 1;
        let seq = TokenSequence::contiguous(vec![token], position);
        let logits = forward_step(weights, &seq, self.blocks(), state, self.scale_factor())?;
        Ok(log_softmax(&logits))
    }
}

/// Builds the conventional context `[bos] d_1 ... d_N`.
pub fn conventional_context(demos: &[Vec<u32>], order: &[usize], bos: bool) -> Vec<u32> {
    let mut ctx = Vec::new();
    if bos {
        ctx.push(crate::model::tokenizer::BOS);
    }
    for &i in order {
        ctx.extend_from_slice(&demos[i]);
    }
    ctx
}

fn gather(logits: &[f64], vocab: usize, first_row: usize, completion: &[u32]) -> Vec<f64> {
    completion.iter().enumerate().map(|(t, &c)| logits[(first_row + t) * vocab + c as usize]).collect()
}

fn log_softmax_rows<F: Real>(logits: &[F], vocab: usize) -> Vec<f64> {
    logits.chunks_exact(vocab).flat_map(log_softmax).collect()
}

/// Per-token log-probabilities of `completion` after `context ⊕ prefix`,
/// from one joint forward pass over positions `1..`.
pub fn conventional_logprobs<F: Real>(
    weights: &Weights<F>,
    context: &[u32],
    prefix: &[u32],
    completion: &[u32],
) -> Result<Vec<f64>> {
    let head = context.len() + prefix.len();
    if head == 0 {
        return Err(Error::EmptySequence);
    }
    let tokens: Vec<u32> = context.iter().chain(prefix).chain(completion).copied().collect();
    let max = weights.config.max_positions;
    if tokens.len() > max {
        return Err(Error::WindowOverflow { needed: tokens.len(), max_positions: max });
    }
    let out = forward(weights, &TokenSequence::contiguous(tokens, 1), None, 1.0)?;
    let vocab = weights.config.vocab_size;
    Ok(gather(&log_softmax_rows(&out.logits, vocab), vocab, head - 1, completion))
}

/// Per-token log-probabilities of `completion` after `prefix`, with the
/// grouped context attended through rescaled attention.
pub fn structured_logprobs<F: Real>(
    weights: &Weights<F>,
    context: &GroupedContext<F>,
    prefix: &[u32],
    completion: &[u32],
    scale_factor: f64,
) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::EmptySequence);
    }
    let tokens: Vec<u32> = prefix.iter().chain(completion).copied().collect();
    let positions = test_positions(&context.alignment, tokens.len(), weights.config.max_positions)?;
    let n = tokens.len();
    let seq = TokenSequence { tokens, positions, valid: vec![true; n] };
    let out = forward(weights, &seq, Some(context), scale_factor)?;
    let vocab = weights.config.vocab_size;
    Ok(gather(&log_softmax_rows(&out.logits, vocab), vocab, prefix.len() - 1, completion))
}

/// Log-probabilities of `completion` under any prompt, using the decode path.
pub fn completion_logprobs<F: Real>(
    weights: &Weights<F>,
    prompt: &Prompt<'_, F>,
    prefix: &[u32],
    completion: &[u32],
) -> Result<Vec<f64>> {
    let (mut state, mut next) = prompt.prime(weights, prefix)?;
    let mut out = Vec::with_capacity(completion.len());
    for (t, &c) in completion.iter().enumerate() {
        out.push(next[c as usize]);
        if t + 1 < completion.len() {
            next = prompt.extend(weights, &mut state, c)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: u64,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Mean per-token log-likelihood of each candidate.
    pub scores: Vec<f64>,
    pub chosen: u64,
}

/// Picks the label with the highest score, lowest label id on ties.
pub fn argmax_label(candidates: &[Candidate], scores: &[f64]) -> Option<u64> {
    candidates
        .iter()
        .zip(scores)
        .max_by(|(ca, sa), (cb, sb)| {
            sa.partial_cmp(sb).unwrap_or(Ordering::Equal).then_with(|| cb.label.cmp(&ca.label))
        })
        .map(|(c, _)| c.label)
}

/// Length-normalised likelihood of every candidate completion; the shared
/// prefix is encoded once.
pub fn score_candidates<F: Real>(
    weights: &Weights<F>,
    prompt: &Prompt<'_, F>,
    prefix: &[u32],
    candidates: &[Candidate],
) -> Result<CandidateSet> {
    if candidates.is_empty() {
        return Err(Error::InvalidProtocol("empty candidate set".into()));
    }
    if candidates.iter().any(|c| c.tokens.is_empty()) {
        return Err(Error::InvalidProtocol("empty candidate completion".into()));
    }
    let (state, first) = prompt.prime(weights, prefix)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut total = first[cand.tokens[0] as usize];
        let mut st = state.clone();
        for w in cand.tokens.windows(2) {
            total += prompt.extend(weights, &mut st, w[0])?[w[1] as usize];
        }
        scores.push(total / cand.tokens.len() as f64);
    }
    let chosen = argmax_label(candidates, &scores).expect("non-empty");
    Ok(CandidateSet { candidates: candidates.to_vec(), scores, chosen })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub beam_width: usize,
    /// Exponent `alpha` of the length penalty.
    pub length_penalty: f64,
    pub max_new_tokens: usize,
    pub stop_token: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { beam_width: 3, length_penalty: 0.6, max_new_tokens: 30, stop_token: DELIM }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_new_tokens == 0 || !self.length_penalty.is_finite() {
            return Err(Error::InvalidProtocol(format!(
                "beam_width {} and max_new_tokens {} must be >= 1 and alpha finite",
                self.beam_width, self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// `((5 + len) / 6) ^ alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Final ranking score of a finished hypothesis.
pub fn penalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / length_penalty(len, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated tokens, including the stop token when one was produced.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
}

impl Generation {
    /// Generated tokens without the trailing stop token.
    pub fn content(&self, stop_token: u32) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == stop_token => rest,
            _ => &self.tokens,
        }
    }
}

struct Hypothesis<F> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: DecodeState<F>,
    next: Vec<f64>,
}

/// Beam search. Each step expands every live hypothesis over the whole
/// vocabulary and keeps the `beam_width` best extensions by cumulative
/// log-probability. An extension closes when it emits the stop token, when
/// it reaches `max_new_tokens`, or when the window has no position left for
/// it. Closed hypotheses are ranked by `log_prob / lp(len)`, where `len`
/// counts every generated token including the stop token.
pub fn beam_search<F: Real>(
    weights: &Weights<F>,
    prompt: &Prompt<'_, F>,
    prefix: &[u32],
    params: &GenerationParams,
) -> Result<Generation> {
    params.validate()?;
    let max_positions = weights.config.max_positions;
    let (state, next) = prompt.prime(weights, prefix)?;
    let end = state.last_position().unwrap_or(0);
    if end >= max_positions {
        return Err(Error::WindowOverflow { needed: end + 1, max_positions });
    }
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, state, next }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for step in 1..=params.max_new_tokens {
        let mut expansions: Vec<(f64, usize, u32)> = live
            .iter()
            .enumerate()
            .flat_map(|(hi, h)| h.next.iter().enumerate().map(move |(v, lp)| (h.log_prob + lp, hi, v as u32)))
            .collect();
        expansions.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));
        expansions.truncate(params.beam_width);

        let mut next_live = Vec::new();
        for (log_prob, hi, token) in expansions {
            let parent = &live[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(token);
            let position = parent.state.last_position().unwrap_or(0) + 1;
            if token == params.stop_token || step == params.max_new_tokens || position >= max_positions {
                finished.push((tokens, log_prob));
                continue;
            }
            let mut state = parent.state.clone();
            let next = prompt.extend(weights, &mut state, token)?;
            next_live.push(Hypothesis { tokens, log_prob, state, next });
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let alpha = params.length_penalty;
    finished
        .into_iter()
        .map(|(tokens, log_prob)| {
            let score = penalized_score(log_prob, tokens.len(), alpha);
            Generation { tokens, log_prob, score }
        })
        .reduce(|best, g| if g.score > best.score { g } else { best })
        .ok_or(Error::EmptySequence)
}

/// Beam search followed by detokenisation of the winning completion.
pub fn generate<F: Real>(
    weights: &Weights<F>,
    prompt: &Prompt<'_, F>,
    prefix: &[u32],
    params: &GenerationParams,
    vocab: &Vocab,
) -> Result<String> {
    let g = beam_search(weights, prompt, prefix, params)?;
    Ok(vocab.detokenize(g.content(params.stop_token)))
}
