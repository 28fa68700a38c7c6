//! Whitespace vocabulary built from task text.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const DELIM: u32 = 2;
pub const UNK: u32 = 3;
pub const SPACE: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<delim>", "<unk>", "<space>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(file: VocabFile) -> Self {
        Self::from_words(file.words)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { words: v.words }
    }
}

impl Vocab {
    /// Reserved tokens first, then every distinct whitespace-separated word of
    /// `texts` in sorted order, so the ids do not depend on input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut distinct = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                if !RESERVED.contains(&w) {
                    distinct.insert(w.to_owned());
                }
            }
        }
        let words = RESERVED.iter().map(|s| s.to_string()).chain(distinct).collect();
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.word(id).unwrap_or(RESERVED[UNK as usize])).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["red blue", "green red"])
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        for (i, w) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(w), Some(i as u32));
        }
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn round_trip_in_vocabulary() {
        let v = vocab();
        let ids = v.tokenize("red blue");
        assert_eq!(ids, vec![v.id("red").unwrap(), v.id("blue").unwrap()]);
        assert_eq!(v.detokenize(&ids), "red blue");
    }

    #[test]
    fn empty_text() {
        let v = vocab();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&[]), "");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        assert_eq!(vocab().tokenize("purple"), vec![UNK]);
    }

    #[test]
    fn build_is_order_independent() {
        assert_eq!(Vocab::build(["b a", "c"]), Vocab::build(["c", "a b"]));
    }

    #[test]
    fn json_round_trip() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
