//! Answer normalisation, exact match and token-bag F1.

use std::collections::HashMap;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn bag_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Lowercases, strips punctuation, drops articles and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    bag_tokens(text).into_iter().filter(|w| !ARTICLES.contains(&w.as_str())).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-bag F1. Articles count as tokens here, except that any pair that
/// is an exact match scores 1.
pub fn f1(prediction: &str, gold: &str) -> f64 {
    if exact_match(prediction, gold) == 1.0 {
        return 1.0;
    }
    let pred = bag_tokens(prediction);
    let gold = bag_tokens(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &gold {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &pred {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_normalises() {
        assert_eq!(exact_match("Paris", "paris "), 1.0);
        assert_eq!(exact_match("the cat", "cat"), 1.0);
        assert_eq!(exact_match("cat", "cats"), 0.0);
        assert_eq!(exact_match("Hello, world!", "hello   world"), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert!((f1("a b c", "b c d") - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1("x y z", "y z w") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1("same words", "same words"), 1.0);
        assert_eq!(f1("", ""), 1.0);
        assert_eq!(f1("", "x"), 0.0);
        assert_eq!(f1("x", ""), 0.0);
        assert_eq!(f1("x", "y"), 0.0);
        assert_eq!(f1("the cat", "cat"), 1.0);
        assert_eq!(f1("the", ""), 1.0);
        assert!((f1("x x y", "x y y") - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn exact_match_implies_full_f1(a in "[a-cA-C ,.]{0,12}", b in "[a-cA-C ,.]{0,12}") {
            let f = f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            if exact_match(&a, &b) == 1.0 {
                prop_assert_eq!(f, 1.0);
            }
            prop_assert_eq!(f, f1(&b, &a));
        }
    }
}
