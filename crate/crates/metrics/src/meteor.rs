//! METEOR-lite: exact-match unigram alignment with a fragmentation penalty.
//! No stemming or synonymy, so absolute values differ from the official tool;
//! relative comparisons on a fixed corpus remain meaningful.

use crate::EvalPair;

/// Precision weight in the harmonic mean (recall-dominant, classic setting).
pub const METEOR_ALPHA: f64 = 0.9;
/// Fragmentation penalty scale.
pub const METEOR_GAMMA: f64 = 0.5;

/// Aligns candidate tokens to reference tokens left to right, preferring the
/// continuation of the current chunk so the alignment has as few chunks as a
/// greedy scan allows. Returns (matches, chunks).
fn align<T: Eq>(cand: &[T], reference: &[T]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut prev_ref: Option<usize> = None;
    for (i, tok) in cand.iter().enumerate() {
        let next = prev_ref.map(|j| j + 1);
        let choice = match next {
            Some(j) if j < reference.len() && !used[j] && reference[j] == *tok => Some(j),
            _ => (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok),
        };
        prev_ref = choice;
        if let Some(j) = choice {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let mut chunks = 0;
    for (k, &(ci, rj)) in pairs.iter().enumerate() {
        let continues = k > 0 && {
            let (pci, prj) = pairs[k - 1];
            ci == pci + 1 && rj == prj + 1
        };
        if !continues {
            chunks += 1;
        }
    }
    (pairs.len(), chunks)
}

fn score_pair<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    let (m, chunks) = align(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let frag = chunks as f64 / m as f64;
    f_mean * (1.0 - METEOR_GAMMA * frag.powi(3))
}

/// Mean over pairs of the best per-reference score.
pub fn meteor_lite<T: Eq>(pairs: &[EvalPair<T>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|pair| {
            pair.references
                .iter()
                .map(|r| score_pair(&pair.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    sum / pairs.len() as f64
}
