//! Turning labelled records into independently encoded, right-aligned groups.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{forward, KvBlock, TokenSequence};
use crate::model::tokenizer::{Vocab, BOS, DELIM, PAD, SPACE};
use crate::model::weights::Weights;
use crate::tensor::Real;

/// A record field: free text, or a class id to be mapped through a template's label map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Class(u64),
    Text(String),
}

/// One line of a demonstration file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Record(pub BTreeMap<String, FieldValue>);

impl Record {
    pub fn with(mut self, key: &str, value: FieldValue) -> Self {
        self.0.insert(key.to_owned(), value);
        self
    }

    pub fn text(self, key: &str, value: impl Into<String>) -> Self {
        self.with(key, FieldValue::Text(value.into()))
    }

    pub fn class(self, key: &str, id: u64) -> Self {
        self.with(key, FieldValue::Class(id))
    }

    pub fn get(&self, key: &str) -> Option<&FieldValue> {
        self.0.get(key)
    }
}

/// Reads line-delimited JSON records, skipping blank lines.
pub fn read_records(reader: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| Error::BadRecord { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(records: &[Record]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialise") + "\n").collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Demonstration {
    pub input_text: String,
    pub output_text: String,
    pub rendered: String,
}

/// A `{field}` pattern whose `target_field` placeholder holds the answer.
///
/// Rendering a record that lacks the target yields the prompt only: the
/// pattern up to the target placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub pattern: String,
    pub target_field: String,
    /// Verbalizer for class id `i` at index `i`. Empty for open-ended tasks.
    #[serde(default)]
    pub label_map: Vec<String>,
}

enum Piece<'a> {
    Literal(&'a str),
    Field(&'a str),
}

fn parse_pattern(pattern: &str) -> Result<Vec<Piece<'_>>> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Literal(&rest[..open]));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::InvalidTemplate(format!("unclosed placeholder in {pattern:?}")))?;
        let name = &rest[open + 1..open + close];
        if name.is_empty() || name.contains('{') {
            return Err(Error::InvalidTemplate(format!("bad placeholder in {pattern:?}")));
        }
        pieces.push(Piece::Field(name));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest));
    }
    Ok(pieces)
}

impl Template {
    pub fn new(name: &str, pattern: &str, target_field: &str, labels: &[&str]) -> Result<Self> {
        let t = Self {
            name: name.to_owned(),
            pattern: pattern.to_owned(),
            target_field: target_field.to_owned(),
            label_map: labels.iter().map(|s| s.to_string()).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let pieces = parse_pattern(&self.pattern)?;
        let targets = pieces.iter().filter(|p| matches!(p, Piece::Field(f) if *f == self.target_field)).count();
        if targets != 1 {
            return Err(Error::InvalidTemplate(format!(
                "{}: target {{{}}} must appear exactly once",
                self.name, self.target_field
            )));
        }
        for (i, a) in self.label_map.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(Error::InvalidTemplate(format!("{}: empty verbalizer", self.name)));
            }
            if self.label_map[..i].contains(a) {
                return Err(Error::InvalidTemplate(format!("{}: duplicate verbalizer {a:?}", self.name)));
            }
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        !self.label_map.is_empty()
    }

    pub fn placeholders(&self) -> Vec<String> {
        parse_pattern(&self.pattern)
            .map(|p| {
                p.into_iter()
                    .filter_map(|x| match x {
                        Piece::Field(f) => Some(f.to_owned()),
                        Piece::Literal(_) => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Every literal word the pattern can emit, for vocabulary building.
    pub fn literal_text(&self) -> String {
        let mut out: String = parse_pattern(&self.pattern)
            .map(|p| {
                p.into_iter()
                    .filter_map(|x| match x {
                        Piece::Literal(s) => Some(s.to_owned() + " "),
                        Piece::Field(_) => None,
                    })
                    .collect()
            })
            .unwrap_or_default();
        out.push_str(&self.label_map.join(" "));
        out
    }

    pub fn verbalizer(&self, label: u64) -> Result<&str> {
        self.label_map
            .get(label as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownLabel { template: self.name.clone(), label })
    }

    fn field_text(&self, record: &Record, field: &str) -> Result<String> {
        match record.get(field) {
            Some(FieldValue::Text(s)) => Ok(s.clone()),
            Some(FieldValue::Class(id)) if field == self.target_field => Ok(self.verbalizer(*id)?.to_owned()),
            Some(FieldValue::Class(id)) => Ok(id.to_string()),
            None => Err(Error::MissingField { template: self.name.clone(), field: field.to_owned() }),
        }
    }

    /// Substitutes `record` into the pattern. Without a target value only the
    /// prompt is rendered and `output_text` is empty.
    pub fn render(&self, record: &Record) -> Result<Demonstration> {
        let pieces = parse_pattern(&self.pattern)?;
        let mut prompt = String::new();
        let mut suffix = String::new();
        let mut output = None;
        for piece in &pieces {
            let dst = if output.is_some() { &mut suffix } else { &mut prompt };
            match piece {
                Piece::Literal(s) => dst.push_str(s),
                Piece::Field(f) if *f == self.target_field => {
                    output = Some(match record.get(f) {
                        Some(_) => Some(self.field_text(record, f)?),
                        None => None,
                    });
                }
                Piece::Field(f) => dst.push_str(&self.field_text(record, f)?),
            }
        }
        let input_text = prompt.trim_end().to_owned();
        let (output_text, rendered) = match output.flatten() {
            Some(out) => {
                let rendered = format!("{prompt}{out}{suffix}");
                (out, rendered)
            }
            None => (String::new(), input_text.clone()),
        };
        if rendered.trim().is_empty() {
            return Err(Error::InvalidTemplate(format!("{}: rendered text is empty", self.name)));
        }
        Ok(Demonstration { input_text, output_text, rendered })
    }

    /// The class id of a record's target, if it is a classification record.
    pub fn label_of(&self, record: &Record) -> Option<u64> {
        match record.get(&self.target_field) {
            Some(FieldValue::Class(id)) => Some(*id),
            _ => None,
        }
    }

    /// The gold completion text of a record.
    pub fn answer_of(&self, record: &Record) -> Result<String> {
        self.field_text(record, &self.target_field)
    }
}

/// A few built-in templates in the usual `Field: {Field}` style.
pub fn builtin_template(name: &str) -> Option<Template> {
    let t = match name {
        "sst2" => Template::new("sst2", "Sentence: {Sentence}\nLabel: {Label}", "Label", &["Negative", "Positive"]),
        "sst5" => Template::new(
            "sst5",
            "Sentence: {Sentence}\nLabel: {Label}",
            "Label",
            &["terrible", "bad", "neutral", "good", "great"],
        ),
        "mr" => Template::new("mr", "Review: {Sentence}\nSentiment: {Label}", "Label", &["Negative", "Positive"]),
        "subj" => Template::new("subj", "Input: {Sentence}\nType: {Label}", "Label", &["objective", "subjective"]),
        "nq" => Template::new("nq", "Question: {Question} Answer: {Answer}", "Answer", &[]),
        "lookup" => Template::new("lookup", "{Key} {Value}", "Value", &[]),
        _ => return None,
    };
    Some(t.expect("built-in templates are valid"))
}

pub const BUILTIN_TEMPLATES: [&str; 6] = ["sst2", "sst5", "mr", "subj", "nq", "lookup"];

/// Tokens of a rendered demonstration followed by the delimiter.
pub fn demonstration_tokens(vocab: &Vocab, demo: &Demonstration, delimiter: u32) -> Vec<u32> {
    let mut t = vocab.tokenize(&demo.rendered);
    t.push(delimiter);
    t
}

/// Demonstration indices split into groups `[N_0, N_1) ... [N_{M-1}, N_M)`
/// of `order`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub order: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub seed: u64,
}

impl GroupPartition {
    pub fn group_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.boundaries.windows(2).map(|w| &self.order[w[0]..w[1]])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Shuffles `n` demonstrations and splits them into `groups` contiguous runs
/// whose sizes differ by at most one, larger runs first.
pub fn partition(n: usize, groups: usize, seed: u64) -> Result<GroupPartition> {
    if groups == 0 || groups > n {
        return Err(Error::BadGroupCount { demos: n, groups });
    }
    let base = n / groups;
    let extra = n % groups;
    let mut boundaries = vec![0];
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        boundaries.push(boundaries[g] + size);
    }
    Ok(GroupPartition { order: shuffled(n, seed), boundaries, seed })
}

/// Greedy packing of shuffled demonstrations: a group closes when the next
/// demonstration would push it past `budget` tokens.
pub fn pack_by_budget(token_lengths: &[usize], budget: usize, seed: u64) -> Result<GroupPartition> {
    if let Some((index, &tokens)) = token_lengths.iter().enumerate().find(|(_, &t)| t > budget) {
        return Err(Error::OversizedDemonstration { index, tokens, budget });
    }
    if token_lengths.is_empty() {
        return Err(Error::BadGroupCount { demos: 0, groups: 0 });
    }
    let order = shuffled(token_lengths.len(), seed);
    let mut boundaries = vec![0];
    let mut used = 0;
    for (i, &d) in order.iter().enumerate() {
        let len = token_lengths[d];
        if used + len > budget {
            boundaries.push(i);
            used = 0;
        }
        used += len;
    }
    boundaries.push(order.len());
    Ok(GroupPartition { order, boundaries, seed })
}

/// Token lists of each group: optional bos, then the group's demonstrations.
pub fn assemble_groups(demos: &[Vec<u32>], partition: &GroupPartition, bos: bool) -> Vec<Vec<u32>> {
    partition
        .groups()
        .map(|idx| {
            let mut g = Vec::new();
            if bos {
                g.push(BOS);
            }
            for &i in idx {
                g.extend_from_slice(&demos[i]);
            }
            g
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentStrategy {
    /// Left pad with masked pad tokens.
    AttentionMask,
    /// Left pad with attended space tokens.
    PadSpace,
    /// Drop leftmost tokens beyond `L`; shorter groups keep their length.
    Truncate,
    /// Positions start at 1 for every group.
    NoRightAlignment,
}

impl AlignmentStrategy {
    pub const ALL: [AlignmentStrategy; 4] = [
        AlignmentStrategy::AttentionMask,
        AlignmentStrategy::PadSpace,
        AlignmentStrategy::Truncate,
        AlignmentStrategy::NoRightAlignment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AttentionMask => "attention_mask",
            Self::PadSpace => "pad_space",
            Self::Truncate => "truncate",
            Self::NoRightAlignment => "no_right_alignment",
        }
    }

    pub fn is_right_aligned(self) -> bool {
        self != Self::NoRightAlignment
    }
}

impl fmt::Display for AlignmentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignmentStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::InvalidAlignment(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Shared maximum position `L` of every group.
    pub length: usize,
    pub strategy: AlignmentStrategy,
    pub delimiter: u32,
}

impl AlignmentConfig {
    pub fn new(length: usize, strategy: AlignmentStrategy) -> Self {
        Self { length, strategy, delimiter: DELIM }
    }

    /// `L = max_positions - reserve`, leaving `reserve` positions for the test input.
    pub fn with_reserve(max_positions: usize, reserve: usize, strategy: AlignmentStrategy) -> Result<Self> {
        if reserve == 0 || reserve >= max_positions {
            return Err(Error::InvalidAlignment(format!("reserve {reserve} must lie in [1, {max_positions})")));
        }
        Ok(Self::new(max_positions - reserve, strategy))
    }

    /// `L` equal to the longest group.
    pub fn fit(groups: &[Vec<u32>], strategy: AlignmentStrategy) -> Self {
        Self::new(groups.iter().map(Vec::len).max().unwrap_or(1), strategy)
    }

    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.length < 1 {
            return Err(Error::InvalidAlignment("L must be at least 1".into()));
        }
        if self.length >= max_positions {
            return Err(Error::InvalidAlignment(format!(
                "L = {} leaves no room for a test input in a window of {max_positions}",
                self.length
            )));
        }
        Ok(())
    }
}

/// Lays out one group's tokens according to the alignment strategy.
pub fn align_group(tokens: &[u32], config: &AlignmentConfig) -> Result<TokenSequence> {
    let l = config.length;
    if l < 1 {
        return Err(Error::InvalidAlignment("L must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidAlignment("empty group".into()));
    }
    let k = tokens.len();
    let too_long = || Error::InvalidAlignment(format!("group of {k} tokens exceeds L = {l} under {}", config.strategy));
    let seq = match config.strategy {
        AlignmentStrategy::AttentionMask | AlignmentStrategy::PadSpace => {
            if k > l {
                return Err(too_long());
            }
            let (pad, pad_valid) =
                if config.strategy == AlignmentStrategy::AttentionMask { (PAD, false) } else { (SPACE, true) };
            let mut t = vec![pad; l - k];
            t.extend_from_slice(tokens);
            let mut valid = vec![pad_valid; l - k];
            valid.extend(std::iter::repeat_n(true, k));
            TokenSequence { tokens: t, positions: (1..=l).collect(), valid }
        }
        AlignmentStrategy::Truncate => {
            let kept = &tokens[k.saturating_sub(l)..];
            TokenSequence::contiguous(kept.to_vec(), l - kept.len() + 1)
        }
        AlignmentStrategy::NoRightAlignment => {
            if k > l {
                return Err(too_long());
            }
            TokenSequence::contiguous(tokens.to_vec(), 1)
        }
    };
    Ok(seq)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub partition_seed: Option<u64>,
    pub template: Option<String>,
}

/// Cached keys/values of `M` independently encoded groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedContext<F> {
    pub blocks: Vec<KvBlock<F>>,
    pub alignment: AlignmentConfig,
    /// Aligned length of each block, padding included.
    pub token_counts: Vec<usize>,
    pub provenance: Provenance,
}

impl<F: Clone> GroupedContext<F> {
    pub fn group_count(&self) -> usize {
        self.blocks.len()
    }

    /// The same groups concatenated in a different order.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            blocks: order.iter().map(|&i| self.blocks[i].clone()).collect(),
            token_counts: order.iter().map(|&i| self.token_counts[i]).collect(),
            alignment: self.alignment,
            provenance: self.provenance.clone(),
        }
    }

    /// Position of the first test token.
    pub fn test_start(&self) -> usize {
        self.alignment.length + 1
    }
}

/// Encodes each group on its own (no cross-group attention) and keeps its
/// per-layer keys and values.
pub fn encode_groups<F: Real>(
    weights: &Weights<F>,
    groups: &[Vec<u32>],
    config: &AlignmentConfig,
    provenance: Provenance,
) -> Result<GroupedContext<F>> {
    config.validate(weights.config.max_positions)?;
    let mut blocks = Vec::with_capacity(groups.len());
    let mut token_counts = Vec::with_capacity(groups.len());
    for g in groups {
        let seq = align_group(g, config)?;
        token_counts.push(seq.len());
        blocks.push(forward(weights, &seq, None, 1.0)?.self_kv);
    }
    Ok(GroupedContext { blocks, alignment: *config, token_counts, provenance })
}

/// Positions `L+1 ..= L+len_test` of the test input.
pub fn test_positions(config: &AlignmentConfig, len_test: usize, max_positions: usize) -> Result<Vec<usize>> {
    let end = config.length + len_test;
    if end > max_positions {
        return Err(Error::WindowOverflow { needed: end, max_positions });
    }
    Ok((config.length + 1..=end).collect())
}
