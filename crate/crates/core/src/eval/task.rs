//! Synthetic tasks standing in for real datasets.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{Record, Template};
use crate::error::{Error, Result};
use crate::model::tokenizer::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Lookup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Each class owns a disjoint word set; an example is a bag of its words.
    Classification {
        classes: usize,
        words_per_class: usize,
        sentence_len: usize,
        pool_size: usize,
        test_size: usize,
        seed: u64,
    },
    /// A random injective key→value map; the test asks for the value of a
    /// key from the demonstration pool.
    Lookup { key_words: usize, value_words: usize, pairs: usize, test_size: usize, seed: u64 },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Classification { .. } => TaskKind::Classification,
            TaskSpec::Lookup { .. } => TaskKind::Lookup,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TaskSpec::Classification { seed, .. } | TaskSpec::Lookup { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            TaskSpec::Classification { seed, .. } | TaskSpec::Lookup { seed, .. } => *seed = new_seed,
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidTask(m));
        match *self {
            TaskSpec::Classification { classes, words_per_class, sentence_len, pool_size, test_size, .. } => {
                if classes < 2 {
                    return fail(format!("{classes} classes; need at least 2"));
                }
                if words_per_class == 0 || sentence_len == 0 {
                    return fail("classes need words and sentences need length".into());
                }
                if pool_size == 0 || test_size == 0 {
                    return fail("empty pool or test split".into());
                }
            }
            TaskSpec::Lookup { key_words, value_words, pairs, test_size, .. } => {
                if pairs == 0 || test_size == 0 {
                    return fail("empty pool or test split".into());
                }
                if pairs > key_words || pairs > value_words {
                    return fail(format!(
                        "{pairs} pairs need at least as many key ({key_words}) and value ({value_words}) words"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn template(&self) -> Template {
        match *self {
            TaskSpec::Classification { classes, .. } => {
                let labels: Vec<String> = (0..classes).map(class_label).collect();
                let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                Template::new("bag", "Input: {Sentence} Type: {Label}", "Label", &refs).expect("valid template")
            }
            TaskSpec::Lookup { .. } => Template::new("lookup", "{Key} {Value}", "Value", &[]).expect("valid template"),
        }
    }

    /// Every content word the task family can use, independent of the seed.
    pub fn content_words(&self) -> Vec<String> {
        match *self {
            TaskSpec::Classification { classes, words_per_class, .. } => {
                (0..classes).flat_map(|c| (0..words_per_class).map(move |i| class_word(c, i))).collect()
            }
            TaskSpec::Lookup { key_words, value_words, .. } => {
                (0..key_words).map(key_word).chain((0..value_words).map(value_word)).collect()
            }
        }
    }

    /// Vocabulary over the template literals and every content word.
    pub fn vocab(&self) -> Vocab {
        let words = self.content_words().join(" ");
        let literals = self.template().literal_text();
        Vocab::build([words.as_str(), literals.as_str()])
    }
}

pub fn class_word(class: usize, i: usize) -> String {
    format!("c{class}w{i}")
}

pub fn class_label(class: usize) -> String {
    format!("class{class}")
}

pub fn key_word(i: usize) -> String {
    format!("k{i}")
}

pub fn value_word(i: usize) -> String {
    format!("v{i}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: Option<TaskSpec>,
    pub template: Template,
    pub pool: Vec<Record>,
    pub test: Vec<Record>,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        if self.template.is_classification() {
            TaskKind::Classification
        } else {
            TaskKind::Lookup
        }
    }
}

/// Deterministic demonstration pool and test set for `spec`.
pub fn gen_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
    let (pool, test) = match *spec {
        TaskSpec::Classification { classes, words_per_class, sentence_len, pool_size, test_size, .. } => {
            let example = |rng: &mut ChaCha8Rng| {
                let class = rng.gen_range(0..classes);
                let words: Vec<String> =
                    (0..sentence_len).map(|_| class_word(class, rng.gen_range(0..words_per_class))).collect();
                Record::default().text("Sentence", words.join(" ")).class("Label", class as u64)
            };
            let pool = (0..pool_size).map(|_| example(&mut rng)).collect();
            let test = (0..test_size).map(|_| example(&mut rng)).collect();
            (pool, test)
        }
        TaskSpec::Lookup { key_words, value_words, pairs, test_size, .. } => {
            let keys = index::sample(&mut rng, key_words, pairs).into_vec();
            let values = index::sample(&mut rng, value_words, pairs).into_vec();
            let pool: Vec<Record> = keys
                .iter()
                .zip(&values)
                .map(|(&k, &v)| Record::default().text("Key", key_word(k)).text("Value", value_word(v)))
                .collect();
            let test = (0..test_size).map(|_| pool.choose(&mut rng).expect("non-empty pool").clone()).collect();
            (pool, test)
        }
    };
    Ok(Task { spec: Some(spec.clone()), template: spec.template(), pool, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::FieldValue;
    use std::collections::HashMap;

    fn cls(seed: u64) -> TaskSpec {
        TaskSpec::Classification { classes: 2, words_per_class: 5, sentence_len: 4, pool_size: 20, test_size: 30, seed }
    }

    fn lookup(seed: u64) -> TaskSpec {
        TaskSpec::Lookup { key_words: 30, value_words: 30, pairs: 12, test_size: 25, seed }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_task(&lookup(3)).unwrap(), gen_task(&lookup(3)).unwrap());
        assert_ne!(gen_task(&lookup(3)).unwrap().pool, gen_task(&lookup(4)).unwrap().pool);
        assert_eq!(gen_task(&cls(3)).unwrap(), gen_task(&cls(3)).unwrap());
    }

    #[test]
    fn majority_word_classifier_is_perfect() {
        let task = gen_task(&cls(1)).unwrap();
        for r in &task.test {
            let Some(FieldValue::Text(s)) = r.get("Sentence") else { panic!() };
            let mut votes: HashMap<usize, usize> = HashMap::new();
            for w in s.split_whitespace() {
                let class: usize = w[1..w.find('w').unwrap()].parse().unwrap();
                *votes.entry(class).or_default() += 1;
            }
            let guess = votes.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))).unwrap().0;
            assert_eq!(Some(guess as u64), task.template.label_of(r));
        }
    }

    #[test]
    fn lookup_answer_appears_in_exactly_one_demonstration() {
        let task = gen_task(&lookup(7)).unwrap();
        for r in &task.test {
            let answer = task.template.answer_of(r).unwrap();
            let hits = task
                .pool
                .iter()
                .filter(|d| {
                    let rendered = task.template.render(d).unwrap().rendered;
                    rendered.split_whitespace().any(|w| w == answer)
                })
                .count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn vocabulary_covers_every_rendered_word() {
        for spec in [cls(2), lookup(2)] {
            let task = gen_task(&spec).unwrap();
            let vocab = spec.vocab();
            for r in task.pool.iter().chain(&task.test) {
                let text = task.template.render(r).unwrap().rendered;
                assert!(!vocab.tokenize(&text).contains(&crate::model::tokenizer::UNK), "{text}");
            }
        }
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        let bad = TaskSpec::Lookup { key_words: 5, value_words: 30, pairs: 12, test_size: 3, seed: 0 };
        assert!(matches!(gen_task(&bad), Err(Error::InvalidTask(_))));
        let bad = TaskSpec::Classification {
            classes: 1,
            words_per_class: 3,
            sentence_len: 2,
            pool_size: 3,
            test_size: 3,
            seed: 0,
        };
        assert!(gen_task(&bad).is_err());
    }
}
