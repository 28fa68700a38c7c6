//! Toy trainer and the lookup pretraining corpus.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{key_word, value_word, TaskSpec};
use crate::context::{demonstration_tokens, Record};
use crate::error::{Error, Result};
use crate::model::backward::accumulate_weighted_gradients;
use crate::model::tokenizer::{Vocab, BOS, DELIM};
use crate::model::weights::Weights;
use crate::tensor::Real;

/// One training sequence; the model predicts `tokens[i+1]` from `tokens[..=i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    #[serde(default = "one")]
    pub start_position: usize,
    /// Loss weight of each target `tokens[1..]`; `None` weights them equally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_weights: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}

impl TrainingSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        TrainingSequence { tokens, start_position: 1, target_weights: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Gradient descent with heavy-ball momentum (`momentum = 0` is plain GD).
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear warmup steps, then cosine decay to zero. `None` keeps the rate fixed.
    pub warmup: Option<usize>,
    pub seed: u64,
    /// Log the mean batch loss every this many steps (0 disables).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, learning_rate: f64) -> Self {
        TrainConfig {
            steps,
            learning_rate,
            batch_size: 1,
            optimizer: Optimizer::default(),
            clip_norm: None,
            warmup: None,
            seed: 0,
            log_every: 0,
        }
    }

    fn rate_at(&self, step: usize) -> f64 {
        let Some(warmup) = self.warmup else { return self.learning_rate };
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let span = self.steps.saturating_sub(warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub weights: Weights<F>,
    pub log: Vec<LossRecord>,
    pub final_loss: Option<f64>,
}

/// Minimises mean next-token cross-entropy over `corpus`. Batches are drawn
/// from a seeded shuffle, so the run is fully determined by its inputs.
pub fn toy_train<F: Real>(
    weights: &Weights<F>,
    corpus: &[TrainingSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("empty training corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate {}", config.learning_rate)));
    }
    if let Some(seq) = corpus.iter().find(|s| s.tokens.len() < 2) {
        return Err(Error::InvalidSequence(format!(
            "training sequence of {} tokens; need at least 2",
            seq.tokens.len()
        )));
    }

    let mut weights = weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut grads = Weights::<F>::zeros(&weights.config);
    let mut first: Vec<Vec<F>> = grads.tensors().iter().map(|t| vec![F::zero(); t.data.len()]).collect();
    let mut second = first.clone();
    let mut log = Vec::new();
    let mut final_loss = None;

    for step in 0..config.steps {
        for t in grads.tensors_mut() {
            t.data.fill(F::zero());
        }
        let share = F::from_f64_lossy(1.0 / config.batch_size as f64);
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order = index::sample(&mut rng, corpus.len(), corpus.len()).into_vec();
                cursor = 0;
            }
            let seq = &corpus[order[cursor]];
            cursor += 1;
            let n = seq.tokens.len();
            let l = accumulate_weighted_gradients(
                &weights,
                &seq.tokens[..n - 1],
                &seq.tokens[1..],
                seq.target_weights.as_deref(),
                seq.start_position,
                share,
                &mut grads,
            )?;
            loss += l.as_f64() / config.batch_size as f64;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        final_loss = Some(loss);
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            log.push(LossRecord { step, loss });
        }

        let mut clip = 1.0;
        if let Some(max_norm) = config.clip_norm {
            let norm =
                grads.tensors().iter().flat_map(|t| t.data.iter()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }

        let rate = config.rate_at(step);
        let grads_view = grads.tensors();
        for (((param, grad), m), v) in
            weights.tensors_mut().into_iter().zip(&grads_view).zip(&mut first).zip(&mut second)
        {
            update(param.data, grad.data, m, v, config.optimizer, rate, clip, step + 1);
        }
        if !weights.all_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(TrainOutcome { weights, log, final_loss })
}

#[allow(clippy::too_many_arguments)]
fn update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    optimizer: Optimizer,
    rate: f64,
    clip: f64,
    t: usize,
) {
    match optimizer {
        Optimizer::Sgd { momentum } => {
            let mu = F::from_f64_lossy(momentum);
            let lr = F::from_f64_lossy(rate);
            let c = F::from_f64_lossy(clip);
            for ((p, &g), m) in param.iter_mut().zip(grad).zip(m.iter_mut()) {
                *m = mu * *m + g * c;
                *p -= lr * *m;
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let b1 = F::from_f64_lossy(beta1);
            let b2 = F::from_f64_lossy(beta2);
            let c = F::from_f64_lossy(clip);
            let bias1 = 1.0 - beta1.powi(t as i32);
            let bias2 = 1.0 - beta2.powi(t as i32);
            let step = F::from_f64_lossy(rate * bias2.sqrt() / bias1);
            let eps = F::from_f64_lossy(epsilon * bias2.sqrt());
            for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * c;
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Shape of the lookup pretraining corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupCorpusSpec {
    pub key_words: usize,
    pub value_words: usize,
    pub episodes: usize,
    /// Bindings per episode are drawn from `2..=max_bindings`.
    pub max_bindings: usize,
    /// Longest sequence (and last usable position).
    pub window: usize,
    /// Loss weight of every target except a value whose key already
    /// appeared in the episode; those weigh 1.
    pub context_weight: f64,
    pub seed: u64,
}

impl LookupCorpusSpec {
    /// Matches the key/value vocabulary of a lookup task.
    pub fn for_task(task: &TaskSpec, episodes: usize, max_bindings: usize, window: usize, seed: u64) -> Result<Self> {
        match *task {
            TaskSpec::Lookup { key_words, value_words, .. } => Ok(LookupCorpusSpec {
                key_words,
                value_words,
                episodes,
                max_bindings,
                window,
                context_weight: 1.0,
                seed,
            }),
            _ => Err(Error::InvalidTask("lookup corpus needs a lookup task".into())),
        }
    }
}

/// Episodes of `k v <delim>` demonstrations over a fresh random
/// binding each, with keys repeating so later values are only predictable
/// from earlier ones in the same sequence. Sequences start with `<bos>` at a
/// random position so every absolute offset is seen.
pub fn lookup_corpus(spec: &LookupCorpusSpec, vocab: &Vocab) -> Result<Vec<TrainingSequence>> {
    let task = TaskSpec::Lookup {
        key_words: spec.key_words,
        value_words: spec.value_words,
        pairs: spec.max_bindings,
        test_size: 1,
        seed: spec.seed,
    };
    task.validate()?;
    if spec.max_bindings < 2 {
        return Err(Error::InvalidTask("episodes need at least 2 bindings".into()));
    }
    let template = task.template();
    let demo_len = template.literal_text().split_whitespace().count() + 3;
    let max_demos = (spec.window - 1) / demo_len;
    if max_demos < 2 {
        return Err(Error::InvalidTask(format!("window {} fits fewer than 2 demonstrations", spec.window)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(spec.episodes);
    for _ in 0..spec.episodes {
        let bindings = rng.gen_range(2..=spec.max_bindings);
        let keys = index::sample(&mut rng, spec.key_words, bindings).into_vec();
        let values = index::sample(&mut rng, spec.value_words, bindings).into_vec();
        let demos = rng.gen_range(2..=max_demos);
        let mut tokens = vec![BOS];
        let mut target_weights = Vec::new();
        let mut seen = vec![false; bindings];
        for _ in 0..demos {
            let b = rng.gen_range(0..bindings);
            let record = Record::default().text("Key", key_word(keys[b])).text("Value", value_word(values[b]));
            let demo = demonstration_tokens(vocab, &template.render(&record)?, DELIM);
            let value_at = demo.len() - 2;
            let recalled = std::mem::replace(&mut seen[b], true);
            target_weights.extend((0..demo.len()).map(|i| {
                if i == value_at && recalled {
                    1.0
                } else {
                    spec.context_weight
                }
            }));
            tokens.extend(demo);
        }
        let start_position = rng.gen_range(1..=spec.window - tokens.len() + 1);
        let target_weights = (spec.context_weight != 1.0).then_some(target_weights);
        corpus.push(TrainingSequence { tokens, start_position, target_weights });
    }
    Ok(corpus)
}

/// Shape of the induction warm-up corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionCorpusSpec {
    pub episodes: usize,
    /// Distinct tokens in each episode's list.
    pub list_len: usize,
    pub queries: usize,
    pub seed: u64,
}

impl Default for InductionCorpusSpec {
    fn default() -> Self {
        InductionCorpusSpec { episodes: 20000, list_len: 16, queries: 10, seed: 0 }
    }
}

/// Episodes `<bos> a_0 .. a_{n-1}` of distinct tokens drawn from `tokens`,
/// then `queries` pairs `a_i a_{i+1}`. Only the second token of each pair is
/// a target, so the loss falls only by copying the successor of an earlier
/// occurrence. Lookup episodes on their own settle on guessing among the
/// values already seen; a first stage on this corpus avoids that plateau.
pub fn induction_corpus(spec: &InductionCorpusSpec, tokens: &[u32]) -> Result<Vec<TrainingSequence>> {
    if spec.list_len < 2 || spec.list_len > tokens.len() {
        return Err(Error::InvalidTask(format!("list of {} drawn from {} tokens", spec.list_len, tokens.len())));
    }
    if spec.queries == 0 {
        return Err(Error::InvalidTask("induction episodes need at least one query".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let corpus = (0..spec.episodes)
        .map(|_| {
            let list: Vec<u32> =
                index::sample(&mut rng, tokens.len(), spec.list_len).into_iter().map(|i| tokens[i]).collect();
            let mut seq = vec![BOS];
            seq.extend(&list);
            let mut weights = vec![0.0; spec.list_len];
            for _ in 0..spec.queries {
                let i = rng.gen_range(0..spec.list_len - 1);
                seq.extend([list[i], list[i + 1]]);
                weights.extend([0.0, 1.0]);
            }
            TrainingSequence { tokens: seq, start_position: 1, target_weights: Some(weights) }
        })
        .collect();
    Ok(corpus)
}

/// Pretraining sequences for a task family: lookup episodes, or shuffled
/// demonstrations from freshly seeded classification pools packed up to
/// the window.
pub fn task_corpus(
    spec: &TaskSpec,
    vocab: &Vocab,
    episodes: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<TrainingSequence>> {
    match *spec {
        TaskSpec::Lookup { pairs, .. } => {
            let mut corpus_spec = LookupCorpusSpec::for_task(spec, episodes, pairs.clamp(2, 8), window, seed)?;
            corpus_spec.context_weight = 0.1;
            lookup_corpus(&corpus_spec, vocab)
        }
        TaskSpec::Classification { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut corpus = Vec::with_capacity(episodes);
            for _ in 0..episodes {
                let task = super::task::gen_task(&spec.with_seed(rng.gen()))?;
                let mut tokens = vec![BOS];
                for record in &task.pool {
                    let demo = demonstration_tokens(vocab, &task.template.render(record)?, DELIM);
                    if tokens.len() + demo.len() > window {
                        break;
                    }
                    tokens.extend(demo);
                }
                if tokens.len() < 2 {
                    return Err(Error::InvalidTask(format!("window {window} fits no demonstration")));
                }
                corpus.push(TrainingSequence::new(tokens));
            }
            Ok(corpus)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::weights::ModelWeights;

    fn tiny(vocab: usize) -> ModelWeights {
        ModelWeights::init_random(&ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            n_layers: 2,
            max_positions: 16,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_leave_weights_unchanged() {
        let w = tiny(12);
        let corpus = vec![TrainingSequence::new(vec![1, 5, 6, 7])];
        let out = toy_train(&w, &corpus, &TrainConfig::new(0, 0.1)).unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.final_loss, None);
    }

    #[test]
    fn memorises_a_single_sequence() {
        let w = tiny(12);
        let corpus = vec![TrainingSequence::new(vec![1, 7, 3, 9, 4, 11, 5, 8])];
        let mut cfg = TrainConfig::new(500, 0.05);
        cfg.log_every = 100;
        let out = toy_train(&w, &corpus, &cfg).unwrap();
        let loss = out.final_loss.unwrap();
        assert!(loss < 0.1, "loss {loss}");
        assert!(out.log.first().unwrap().loss > out.log.last().unwrap().loss);
    }

    #[test]
    fn training_is_deterministic() {
        let w = tiny(12);
        let corpus: Vec<_> = (0..5).map(|i| TrainingSequence::new(vec![1, 5 + i, 6, 7 + i])).collect();
        let mut cfg = TrainConfig::new(20, 0.01);
        cfg.batch_size = 2;
        cfg.optimizer = Optimizer::adam();
        cfg.seed = 9;
        let a = toy_train(&w, &corpus, &cfg).unwrap();
        let b = toy_train(&w, &corpus, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.final_loss, b.final_loss);
    }

    #[test]
    fn divergence_reports_the_step() {
        let w = tiny(12);
        let corpus = vec![TrainingSequence::new(vec![1, 7, 3, 9])];
        let err = toy_train(&w, &corpus, &TrainConfig::new(50, 1e30)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(toy_train(&tiny(12), &[], &TrainConfig::new(1, 0.1)).is_err());
    }

    #[test]
    fn classification_corpus_fits_the_window() {
        let spec = TaskSpec::Classification {
            classes: 2,
            words_per_class: 4,
            sentence_len: 3,
            pool_size: 30,
            test_size: 2,
            seed: 0,
        };
        let corpus = task_corpus(&spec, &spec.vocab(), 5, 48, 3).unwrap();
        assert_eq!(corpus.len(), 5);
        assert!(corpus.iter().all(|s| s.tokens.len() <= 48 && s.tokens.len() > 10));
    }

    #[test]
    fn lookup_corpus_episodes_are_consistent() {
        let task = TaskSpec::Lookup { key_words: 20, value_words: 20, pairs: 5, test_size: 5, seed: 0 };
        let vocab = task.vocab();
        let mut spec = LookupCorpusSpec::for_task(&task, 30, 6, 40, 1).unwrap();
        spec.context_weight = 0.25;
        let corpus = lookup_corpus(&spec, &vocab).unwrap();
        assert_eq!(corpus.len(), 30);
        assert_eq!(corpus, lookup_corpus(&spec, &vocab).unwrap());
        for seq in &corpus {
            assert_eq!(seq.tokens[0], BOS);
            assert!(seq.start_position + seq.tokens.len() - 1 <= 40);
            let tw = seq.target_weights.as_ref().unwrap();
            assert_eq!(tw.len(), seq.tokens.len() - 1);
            let mut binding = std::collections::HashMap::new();
            for (d, demo) in seq.tokens[1..].chunks(3).enumerate() {
                assert_eq!(demo[2], DELIM);
                let prev = binding.insert(demo[0], demo[1]);
                assert!(prev.is_none() || prev == Some(demo[1]));
                for (i, w) in tw[d * 3..][..3].iter().enumerate() {
                    let recalled = i == 1 && prev.is_some();
                    assert_eq!(*w, if recalled { 1.0 } else { 0.25 });
                }
            }
        }
    }

    #[test]
    fn induction_episodes_target_only_successors() {
        let tokens: Vec<u32> = (10..30).collect();
        let spec = InductionCorpusSpec { episodes: 20, list_len: 6, queries: 4, seed: 2 };
        let corpus = induction_corpus(&spec, &tokens).unwrap();
        assert_eq!(corpus, induction_corpus(&spec, &tokens).unwrap());
        for seq in &corpus {
            assert_eq!(seq.tokens.len(), 1 + 6 + 8);
            let list = &seq.tokens[1..7];
            assert!(list.iter().all(|t| tokens.contains(t)));
            assert_eq!(list.iter().collect::<std::collections::HashSet<_>>().len(), 6);
            let tw = seq.target_weights.as_ref().unwrap();
            assert_eq!(tw.iter().sum::<f64>(), 4.0);
            for (q, pair) in seq.tokens[7..].chunks(2).enumerate() {
                let at = list.iter().position(|&t| t == pair[0]).unwrap();
                assert_eq!(list[at + 1], pair[1]);
                assert_eq!(tw[6 + 2 * q + 1], 1.0);
            }
        }
        let short = InductionCorpusSpec { list_len: 30, ..spec };
        assert!(induction_corpus(&short, &tokens).is_err());
    }
}
