//! Corpus-level generation metrics over token sequences.
//!
//! All metrics are pure functions of an evaluation corpus: one candidate and
//! one or more references per sample. Tokens are any hashable type; the
//! fixed `tokenize` rule (lowercase, punctuation split) is provided for text
//! input but id sequences work unchanged.

pub mod bleu;
pub mod cider;
pub mod meteor;
pub mod rouge;

use std::hash::Hash;

use serde::{Deserialize, Serialize};

pub use bleu::bleu;
pub use cider::{cider, CiderVariant};
pub use meteor::meteor_lite;
pub use rouge::rouge_l;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bleu order {0} outside 1..=4")]
    BadOrder(usize),
}

/// One evaluation sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair<T> {
    pub candidate: Vec<T>,
    pub references: Vec<Vec<T>>,
}

impl<T> EvalPair<T> {
    pub fn new(candidate: Vec<T>, references: Vec<Vec<T>>) -> EvalPair<T> {
        assert!(!references.is_empty(), "a pair needs at least one reference");
        EvalPair {
            candidate,
            references,
        }
    }
}

/// Fixed evaluation tokenizer: lowercase, whitespace-separated, with every
/// non-alphanumeric symbol split off as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// All shipped metrics of one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider: f64,
}

pub fn compute_report<T: Eq + Hash + Clone>(pairs: &[EvalPair<T>]) -> MetricReport {
    MetricReport {
        bleu1: bleu(pairs, 1).expect("order 1 is valid"),
        bleu2: bleu(pairs, 2).expect("order 2 is valid"),
        bleu3: bleu(pairs, 3).expect("order 3 is valid"),
        bleu4: bleu(pairs, 4).expect("order 4 is valid"),
        rouge_l: rouge_l(pairs),
        meteor_lite: meteor_lite(pairs),
        cider: cider(pairs, CiderVariant::Plain),
    }
}

/// N-gram counts of a sequence, as (window, count) pairs.
pub(crate) fn ngram_counts<T: Eq + Hash + Clone>(
    tokens: &[T],
    n: usize,
) -> std::collections::HashMap<&[T], usize> {
    let mut counts = std::collections::HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}
