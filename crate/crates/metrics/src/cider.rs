//! CIDEr: consensus scoring via tf-idf n-gram cosine similarity.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::{ngram_counts, EvalPair};

const MAX_ORDER: usize = 4;
/// Length-gaussian width of the D variant.
pub const CIDER_D_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiderVariant {
    /// Plain tf-idf cosine, averaged over orders and references, times 10.
    Plain,
    /// Count-clipped numerator with a length gaussian (sigma 6).
    D,
}

/// Document frequency per order: number of samples whose reference set
/// contains the n-gram at least once.
fn document_frequencies<'a, T: Eq + Hash>(
    pairs: &'a [EvalPair<T>],
    n: usize,
) -> HashMap<&'a [T], usize> {
    let mut df: HashMap<&[T], usize> = HashMap::new();
    for pair in pairs {
        let mut seen: HashSet<&[T]> = HashSet::new();
        for r in &pair.references {
            if r.len() >= n {
                for w in r.windows(n) {
                    seen.insert(w);
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    df
}

fn tfidf_vec<'a, T: Eq + Hash + Clone>(
    tokens: &'a [T],
    n: usize,
    df: &HashMap<&[T], usize>,
    num_docs: usize,
) -> HashMap<&'a [T], f64> {
    let counts = ngram_counts(tokens, n);
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1);
            let idf = (num_docs as f64 / d as f64).ln();
            (g, c as f64 * idf)
        })
        .collect()
}

fn norm<T>(v: &HashMap<&[T], f64>) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

/// Corpus CIDEr. Idf comes from the reference corpus itself; grams never
/// seen in any reference fall back to df = 1 (maximal idf). Zero-norm
/// vectors (no n-grams of that order, or all idf zero) contribute 0.
pub fn cider<T: Eq + Hash + Clone>(pairs: &[EvalPair<T>], variant: CiderVariant) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    if pairs.len() == 1 {
        log::warn!("cider: single-document corpus, idf is degenerate");
    }
    let num_docs = pairs.len();
    let mut per_order_sum = [0.0f64; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let df = document_frequencies(pairs, n);
        for pair in pairs {
            let cand = tfidf_vec(&pair.candidate, n, &df, num_docs);
            let cand_norm = norm(&cand);
            let mut sim_sum = 0.0;
            for r in &pair.references {
                let rv = tfidf_vec(r, n, &df, num_docs);
                let rv_norm = norm(&rv);
                if cand_norm == 0.0 || rv_norm == 0.0 {
                    continue;
                }
                let dot: f64 = match variant {
                    CiderVariant::Plain => cand
                        .iter()
                        .map(|(g, &w)| w * rv.get(g).copied().unwrap_or(0.0))
                        .sum(),
                    // Clip candidate weights at the reference's weight.
                    CiderVariant::D => cand
                        .iter()
                        .map(|(g, &w)| {
                            let rw = rv.get(g).copied().unwrap_or(0.0);
                            w.min(rw) * rw
                        })
                        .sum(),
                };
                let mut sim = dot / (cand_norm * rv_norm);
                if variant == CiderVariant::D {
                    let dl = pair.candidate.len() as f64 - r.len() as f64;
                    sim *= (-dl * dl / (2.0 * CIDER_D_SIGMA * CIDER_D_SIGMA)).exp();
                }
                sim_sum += sim;
            }
            per_order_sum[n - 1] += 10.0 * sim_sum / pair.references.len() as f64;
        }
    }
    per_order_sum.iter().sum::<f64>() / (MAX_ORDER * num_docs) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: &[&str], r: &[&str]) -> EvalPair<String> {
        EvalPair::new(
            c.iter().map(|s| s.to_string()).collect(),
            vec![r.iter().map(|s| s.to_string()).collect()],
        )
    }

    #[test]
    fn identity_corpus_of_distinct_documents_scores_ten() {
        // Each document keeps a unique token, so every order has a nonzero
        // tf-idf vector and cosine 1 against itself.
        let pairs = vec![
            pair(&["u1", "a", "b", "c", "d"], &["u1", "a", "b", "c", "d"]),
            pair(&["u2", "a", "b", "c", "d"], &["u2", "a", "b", "c", "d"]),
            pair(&["u3", "e", "f", "g", "h"], &["u3", "e", "f", "g", "h"]),
        ];
        let s = cider(&pairs, CiderVariant::Plain);
        assert!((s - 10.0).abs() < 1e-9, "got {}", s);
        let sd = cider(&pairs, CiderVariant::D);
        assert!((sd - 10.0).abs() < 1e-9, "d variant got {}", sd);
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let pairs = vec![
            pair(&["x", "y"], &["a", "b", "c"]),
            pair(&["p", "q"], &["d", "e", "f"]),
        ];
        assert_eq!(cider(&pairs, CiderVariant::Plain), 0.0);
    }

    #[test]
    fn matches_direct_evaluation_on_shared_bigram_fixture() {
        // Three pairs; candidate 0 shares the bigram (k, l) with reference 2.
        let pairs = vec![
            pair(&["k", "l"], &["a", "b"]),
            pair(&["c", "d"], &["c", "d"]),
            pair(&["e", "f"], &["k", "l"]),
        ];
        // Direct evaluation, order 1 (idf = ln(3/1) for every gram here):
        // cand0 {k, l} vs ref0 {a, b}: cos = 0.
        // cand1 == ref1: cos = 1. cand2 {e,f} vs ref2 {k,l}: e,f unseen in
        // refs -> df floor 1 -> idf ln3; cos = 0 (no shared gram).
        // Order 2: cand0 bigram (k,l) appears in ref2's set: idf ln(3/1);
        // ref0 bigram (a,b) idf ln3; cos = 0 (no shared bigram with ref0).
        // cand1 vs ref1: cos = 1. Orders 3,4: no grams, contribute 0.
        // Total = 10 * (1 + 1) / (4 * 3).
        let expect = 10.0 * 2.0 / 12.0;
        let s = cider(&pairs, CiderVariant::Plain);
        assert!((s - expect).abs() < 1e-9, "got {}, want {}", s, expect);
    }

    #[test]
    fn shared_grams_across_all_documents_carry_zero_idf() {
        // "z" appears in every reference document: idf = ln(3/3) = 0, so a
        // candidate matching only "z" scores 0 despite the overlap.
        let pairs = vec![
            pair(&["z"], &["z", "a"]),
            pair(&["b"], &["z", "b"]),
            pair(&["c"], &["z", "c"]),
        ];
        let s = cider(&pairs, CiderVariant::Plain);
        // Pair 1 and 2 candidates match their references' non-z token.
        // cand "b": vec {b: ln3}; ref {z: 0, b: ln3}; cos = 1. Same for "c".
        // Pair 0 cand "z": vector norm 0 -> contributes 0.
        let expect = 10.0 * 2.0 / 12.0;
        assert!((s - expect).abs() < 1e-9, "got {}", s);
    }

    #[test]
    fn d_variant_penalizes_length_mismatch() {
        let long_ref: Vec<&str> = vec!["a", "b", "c", "d", "e", "f", "g", "h", "u", "v"];
        let pairs = vec![
            pair(&["a", "b"], &long_ref),
            pair(&["p", "q", "r"], &["p", "q", "r"]),
        ];
        let plain = cider(&pairs, CiderVariant::Plain);
        let d = cider(&pairs, CiderVariant::D);
        assert!(d < plain, "length gaussian must reduce the mismatched pair");
    }
}
