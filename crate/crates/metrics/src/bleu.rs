//! Corpus BLEU: clipped n-gram precision, geometric mean, brevity penalty.

use std::hash::Hash;

use crate::{ngram_counts, EvalPair, MetricsError};

/// Precision floor for orders with zero clipped matches.
pub const BLEU_EPS: f64 = 1e-9;

/// Reference length closest to the candidate's; ties pick the shorter.
fn effective_ref_len<T>(cand_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&rl| (rl.abs_diff(cand_len), rl))
        .expect("pairs carry at least one reference")
}

/// Corpus-level BLEU-n for n in 1..=4.
///
/// Aggregates clipped counts over the whole corpus before taking precisions
/// (so pair order cannot matter), applies the closest-reference brevity
/// penalty, and floors zero-match precisions at `BLEU_EPS`.
pub fn bleu<T: Eq + Hash + Clone>(
    pairs: &[EvalPair<T>],
    max_n: usize,
) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&max_n) {
        return Err(MetricsError::BadOrder(max_n));
    }
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len_sum = 0usize;
    let mut ref_len_sum = 0usize;
    for pair in pairs {
        if pair.candidate.is_empty() {
            log::warn!("bleu: empty candidate scored as zero overlap");
        }
        cand_len_sum += pair.candidate.len();
        ref_len_sum += effective_ref_len(pair.candidate.len(), &pair.references);
        for (k, (clip, total)) in clipped.iter_mut().zip(totals.iter_mut()).enumerate() {
            let n = k + 1;
            let cand = ngram_counts(&pair.candidate, n);
            *total += cand.values().sum::<usize>();
            for (gram, &c) in &cand {
                let best_ref = pair
                    .references
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                *clip += c.min(best_ref);
            }
        }
    }
    if cand_len_sum == 0 {
        log::warn!("bleu: corpus has no candidate tokens");
        return Ok(0.0);
    }
    let bp = if cand_len_sum >= ref_len_sum {
        1.0
    } else {
        (1.0 - ref_len_sum as f64 / cand_len_sum as f64).exp()
    };
    let mut log_sum = 0.0;
    for k in 0..max_n {
        let p = if totals[k] == 0 || clipped[k] == 0 {
            BLEU_EPS
        } else {
            clipped[k] as f64 / totals[k] as f64
        };
        log_sum += p.ln();
    }
    Ok(bp * (log_sum / max_n as f64).exp())
}
