//! Multi-seed evaluation protocol.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::{measure_cost, CostEstimate};
use super::metrics::exact_match;
use super::task::{Task, TaskKind};
use crate::context::{
    assemble_groups, demonstration_tokens, encode_groups, pack_by_budget, partition, AlignmentConfig,
    AlignmentStrategy, GroupedContext, Provenance, Record,
};
use crate::error::{Error, Result};
use crate::inference::{conventional_context, generate, score_candidates, Candidate, GenerationParams, Prompt};
use crate::model::forward::{forward, TokenSequence};
use crate::model::tokenizer::{Vocab, DELIM};
use crate::model::weights::Weights;
use crate::tensor::Real;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Conventional,
    Structured,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Conventional => "conventional",
            Mode::Structured => "structured",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Mode::Conventional),
            "structured" => Ok(Mode::Structured),
            _ => Err(Error::InvalidProtocol(format!("unknown mode {s:?}"))),
        }
    }
}

/// How structured mode splits the demonstrations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Groups(usize),
    TokenBudget(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub shots: usize,
    pub mode: Mode,
    pub grouping: Grouping,
    pub strategy: AlignmentStrategy,
    /// Attention rescaling; `None` uses the group count.
    pub scale_factor: Option<f64>,
    /// Shared group length `L`; `None` fits it to the longest group.
    pub alignment_length: Option<usize>,
    pub seeds: Vec<u64>,
    pub generation: GenerationParams,
}

impl Protocol {
    pub fn conventional(shots: usize, seeds: Vec<u64>) -> Self {
        Protocol {
            shots,
            mode: Mode::Conventional,
            grouping: Grouping::Groups(1),
            strategy: AlignmentStrategy::Truncate,
            scale_factor: None,
            alignment_length: None,
            seeds,
            generation: GenerationParams::default(),
        }
    }

    pub fn structured(shots: usize, groups: usize, seeds: Vec<u64>) -> Self {
        Protocol { mode: Mode::Structured, grouping: Grouping::Groups(groups), ..Self::conventional(shots, seeds) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidProtocol("at least one seed is required".into()));
        }
        self.generation.validate()?;
        if let Some(s) = self.scale_factor {
            if !(s.is_finite() && s >= 1.0) {
                return Err(Error::InvalidProtocol(format!("scale factor {s} must be finite and >= 1")));
            }
        }
        if self.mode == Mode::Structured {
            if self.shots == 0 {
                return Err(Error::InvalidProtocol("structured mode needs at least one demonstration".into()));
            }
            match self.grouping {
                Grouping::Groups(m) if m == 0 || m > self.shots => {
                    return Err(Error::BadGroupCount { demos: self.shots, groups: m });
                }
                Grouping::TokenBudget(0) => {
                    return Err(Error::InvalidProtocol("token budget must be positive".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metric: f64,
    pub groups: usize,
    pub scale_factor: f64,
    pub context_tokens: usize,
    /// Analytic score MACs summed over layers and test items.
    pub cost: CostEstimate,
    pub encode_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub task: String,
    pub metric: String,
    pub protocol: Protocol,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    /// Population variance of the per-seed metrics.
    pub variance: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn metrics(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.metric).collect()
    }

    /// Group count, or `None` when it varied across seeds.
    pub fn groups(&self) -> Option<usize> {
        let first = self.per_seed.first()?.groups;
        self.per_seed.iter().all(|s| s.groups == first).then_some(first)
    }
}

/// Mean and population variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0))
}

struct TestItem {
    prefix: Vec<u32>,
    gold: Gold,
}

enum Gold {
    Label(u64),
    Answer(String),
}

fn test_items(task: &Task, vocab: &Vocab) -> Result<Vec<TestItem>> {
    task.test
        .iter()
        .map(|r| {
            let demo = task.template.render(r)?;
            let prefix = vocab.tokenize(&demo.input_text);
            let gold = match task.kind() {
                TaskKind::Classification => {
                    Gold::Label(task.template.label_of(r).ok_or_else(|| Error::MissingField {
                        template: task.template.name.clone(),
                        field: task.template.target_field.clone(),
                    })?)
                }
                TaskKind::Lookup => Gold::Answer(task.template.answer_of(r)?),
            };
            Ok(TestItem { prefix, gold })
        })
        .collect()
}

fn candidates(task: &Task, vocab: &Vocab) -> Result<Vec<Candidate>> {
    (0..task.template.label_map.len() as u64)
        .map(|label| Ok(Candidate { label, tokens: vocab.tokenize(task.template.verbalizer(label)?) }))
        .collect()
}

/// Token lists of `records` rendered as demonstrations.
pub fn demonstrations(task: &Task, vocab: &Vocab, records: &[Record]) -> Result<Vec<Vec<u32>>> {
    records.iter().map(|r| Ok(demonstration_tokens(vocab, &task.template.render(r)?, DELIM))).collect()
}

/// The `shots` pool indices drawn for `seed`.
pub fn draw_shots(pool_size: usize, shots: usize, seed: u64) -> Result<Vec<usize>> {
    if shots > pool_size {
        return Err(Error::InvalidProtocol(format!("{shots} shots from a pool of {pool_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool_size, shots).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

enum Built<F> {
    Conventional(Vec<u32>),
    Structured(GroupedContext<F>, f64),
}

impl<F: Real> Built<F> {
    fn prompt(&self) -> Prompt<'_, F> {
        match self {
            Built::Conventional(context) => Prompt::Conventional { context },
            Built::Structured(context, scale_factor) => Prompt::Structured { context, scale_factor: *scale_factor },
        }
    }
}

/// Scores or generates every test item under `protocol`, once per seed.
pub fn evaluate<F: Real>(weights: &Weights<F>, vocab: &Vocab, task: &Task, protocol: &Protocol) -> Result<EvalReport> {
    protocol.validate()?;
    if vocab.len() > weights.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "vocabulary of {} words exceeds the model's {}",
            vocab.len(),
            weights.config.vocab_size
        )));
    }
    let items = test_items(task, vocab)?;
    let cands = match task.kind() {
        TaskKind::Classification => candidates(task, vocab)?,
        TaskKind::Lookup => Vec::new(),
    };
    let longest_prefix = items.iter().map(|t| t.prefix.len()).max().unwrap_or(0);
    let longest_completion = match task.kind() {
        TaskKind::Classification => cands.iter().map(|c| c.tokens.len()).max().unwrap_or(0),
        TaskKind::Lookup => 1,
    };
    let cfg = &weights.config;

    let mut per_seed = Vec::with_capacity(protocol.seeds.len());
    for &seed in &protocol.seeds {
        let started = Instant::now();
        let picked = draw_shots(task.pool.len(), protocol.shots, seed)?;
        let records: Vec<Record> = picked.iter().map(|&i| task.pool[i].clone()).collect();
        let demos = demonstrations(task, vocab, &records)?;

        let encode_start = Instant::now();
        let (built, token_counts) = match protocol.mode {
            Mode::Conventional => {
                // Same shuffle as a single structured group, so M = 1 matches.
                let order = match demos.len() {
                    0 => Vec::new(),
                    n => partition(n, 1, seed)?.order,
                };
                let context = conventional_context(&demos, &order, true);
                let needed = context.len() + longest_prefix + longest_completion;
                if needed > cfg.max_positions {
                    return Err(Error::WindowOverflow { needed, max_positions: cfg.max_positions });
                }
                forward(weights, &TokenSequence::contiguous(context.clone(), 1), None, 1.0)?;
                let counts = vec![context.len()];
                (Built::Conventional(context), counts)
            }
            Mode::Structured => {
                let part = match protocol.grouping {
                    Grouping::Groups(m) => partition(demos.len(), m, seed)?,
                    Grouping::TokenBudget(b) => {
                        let lengths: Vec<usize> = demos.iter().map(Vec::len).collect();
                        pack_by_budget(&lengths, b, seed)?
                    }
                };
                let groups = assemble_groups(&demos, &part, true);
                let alignment = match protocol.alignment_length {
                    Some(l) => AlignmentConfig::new(l, protocol.strategy),
                    None => AlignmentConfig::fit(&groups, protocol.strategy),
                };
                let provenance = Provenance { partition_seed: Some(seed), template: Some(task.template.name.clone()) };
                let context = encode_groups(weights, &groups, &alignment, provenance)?;
                let scale = protocol.scale_factor.unwrap_or(context.group_count() as f64);
                let counts = context.token_counts.clone();
                (Built::Structured(context, scale), counts)
            }
        };
        let encode_seconds = encode_start.elapsed().as_secs_f64();

        let prompt = built.prompt();
        let scores: Vec<f64> = items
            .par_iter()
            .map(|item| -> Result<f64> {
                match &item.gold {
                    Gold::Label(label) => {
                        let set = score_candidates(weights, &prompt, &item.prefix, &cands)?;
                        Ok(f64::from(u8::from(set.chosen == *label)))
                    }
                    Gold::Answer(answer) => {
                        let text = generate(weights, &prompt, &item.prefix, &protocol.generation, vocab)?;
                        Ok(exact_match(&text, answer))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let metric = scores.iter().sum::<f64>() / scores.len().max(1) as f64;

        let (groups, scale_factor, context_tokens, cost) = match &built {
            Built::Conventional(context) => {
                // Context and test input form one causal sequence.
                let per_item: CostEstimate = items
                    .iter()
                    .map(|t| measure_cost(&[context.len() + t.prefix.len()], 0, cfg.n_heads, cfg.d_head))
                    .fold(CostEstimate::default(), add_costs);
                (1, 1.0, context.len(), per_item.scaled(cfg.n_layers))
            }
            Built::Structured(context, scale) => {
                let encode = measure_cost(&token_counts, 0, cfg.n_heads, cfg.d_head);
                let decode = items
                    .iter()
                    .map(|t| measure_cost(&token_counts, t.prefix.len(), cfg.n_heads, cfg.d_head))
                    .fold(CostEstimate::default(), add_costs);
                let cost = CostEstimate {
                    encode_pairs: encode.encode_pairs,
                    encode_macs: encode.encode_macs,
                    decode_pairs: decode.decode_pairs,
                    decode_macs: decode.decode_macs,
                };
                (context.group_count(), *scale, token_counts.iter().sum(), cost.scaled(cfg.n_layers))
            }
        };
        per_seed.push(SeedResult {
            seed,
            metric,
            groups,
            scale_factor,
            context_tokens,
            cost,
            encode_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let values: Vec<f64> = per_seed.iter().map(|s| s.metric).collect();
    let (mean, variance) = mean_and_variance(&values);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task: task.template.name.clone(),
        metric: match task.kind() {
            TaskKind::Classification => "accuracy".into(),
            TaskKind::Lookup => "exact_match".into(),
        },
        protocol: protocol.clone(),
        per_seed,
        mean,
        variance,
        std: variance.sqrt(),
    })
}

fn add_costs(a: CostEstimate, b: CostEstimate) -> CostEstimate {
    CostEstimate {
        encode_pairs: a.encode_pairs + b.encode_pairs,
        decode_pairs: a.decode_pairs + b.decode_pairs,
        encode_macs: a.encode_macs + b.encode_macs,
        decode_macs: a.decode_macs + b.decode_macs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::task::{gen_task, TaskSpec};
    use crate::model::config::ModelConfig;

    fn lookup_task() -> (Task, Vocab) {
        let spec = TaskSpec::Lookup { key_words: 12, value_words: 12, pairs: 10, test_size: 6, seed: 2 };
        (gen_task(&spec).unwrap(), spec.vocab())
    }

    fn class_task() -> (Task, Vocab) {
        let spec = TaskSpec::Classification {
            classes: 3,
            words_per_class: 4,
            sentence_len: 2,
            pool_size: 12,
            test_size: 8,
            seed: 4,
        };
        (gen_task(&spec).unwrap(), spec.vocab())
    }

    fn model(vocab: &Vocab, max_positions: usize) -> Weights<f64> {
        Weights::<f32>::init_random(&ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            n_layers: 2,
            max_positions,
            seed: 8,
        })
        .unwrap()
        .cast()
    }

    fn quick(mut p: Protocol) -> Protocol {
        p.generation.max_new_tokens = 3;
        p
    }

    #[test]
    fn single_group_matches_conventional_per_seed() {
        for (task, vocab) in [lookup_task(), class_task()] {
            let w = model(&vocab, 64);
            let seeds: Vec<u64> = (1..=3).collect();
            let conv = evaluate(&w, &vocab, &task, &quick(Protocol::conventional(5, seeds.clone()))).unwrap();
            let structured = evaluate(&w, &vocab, &task, &quick(Protocol::structured(5, 1, seeds))).unwrap();
            assert_eq!(conv.metrics(), structured.metrics());
        }
    }

    #[test]
    fn report_carries_every_seed_and_its_moments() {
        let (task, vocab) = class_task();
        let w = model(&vocab, 64);
        let report = evaluate(&w, &vocab, &task, &Protocol::structured(6, 2, (1..=6).collect())).unwrap();
        assert_eq!(report.per_seed.len(), 6);
        let (mean, var) = mean_and_variance(&report.metrics());
        assert_eq!(report.mean, mean);
        assert_eq!(report.variance, var);
        assert!(report.variance >= 0.0);
        assert_eq!(report.groups(), Some(2));
        assert_eq!(report.per_seed[0].scale_factor, 2.0);
        assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (task, vocab) = lookup_task();
        let w = model(&vocab, 64);
        let p = quick(Protocol::structured(8, 3, vec![4, 5]));
        let a = evaluate(&w, &vocab, &task, &p).unwrap();
        let b = evaluate(&w, &vocab, &task, &p).unwrap();
        assert_eq!(a.metrics(), b.metrics());
        assert_eq!(a.per_seed[0].cost, b.per_seed[0].cost);
    }

    #[test]
    fn conventional_overflow_while_structured_fits() {
        let (task, vocab) = lookup_task();
        let w = model(&vocab, 32);
        let conv = evaluate(&w, &vocab, &task, &quick(Protocol::conventional(10, vec![1])));
        assert!(matches!(conv, Err(Error::WindowOverflow { .. })), "{conv:?}");
        let structured = evaluate(&w, &vocab, &task, &quick(Protocol::structured(10, 4, vec![1])));
        assert!(structured.is_ok(), "{structured:?}");
    }

    #[test]
    fn zero_shot_is_conventional_with_no_demonstrations() {
        let (task, vocab) = class_task();
        let w = model(&vocab, 64);
        let report = evaluate(&w, &vocab, &task, &Protocol::conventional(0, vec![1, 2])).unwrap();
        assert_eq!(report.per_seed[0].context_tokens, 1);
        assert_eq!(report.metrics()[0], report.metrics()[1]);
        assert!(evaluate(&w, &vocab, &task, &Protocol::structured(0, 1, vec![1])).is_err());
    }

    #[test]
    fn token_budget_grouping() {
        let (task, vocab) = lookup_task();
        let w = model(&vocab, 64);
        let mut p = quick(Protocol::structured(8, 1, vec![3]));
        p.grouping = Grouping::TokenBudget(7);
        let report = evaluate(&w, &vocab, &task, &p).unwrap();
        // Three-token demonstrations after <bos>, two per group.
        assert_eq!(report.per_seed[0].groups, 4);
    }

    #[test]
    fn encode_cost_falls_with_more_groups() {
        let (task, vocab) = lookup_task();
        let w = model(&vocab, 64);
        let cost =
            |m| evaluate(&w, &vocab, &task, &quick(Protocol::structured(8, m, vec![1]))).unwrap().per_seed[0].cost;
        assert!(cost(4).encode_macs < cost(2).encode_macs);
        assert!(cost(2).encode_macs < cost(1).encode_macs);
    }

    #[test]
    fn invalid_protocols_are_rejected() {
        assert!(Protocol::conventional(3, vec![]).validate().is_err());
        assert!(Protocol::structured(3, 4, vec![1]).validate().is_err());
        let mut p = Protocol::structured(3, 1, vec![1]);
        p.scale_factor = Some(0.5);
        assert!(p.validate().is_err());
    }
}
