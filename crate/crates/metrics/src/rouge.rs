//! ROUGE-L: longest-common-subsequence F-measure, recall-leaning beta.

use crate::EvalPair;

/// Captioning-convention recall weight.
pub const ROUGE_BETA: f64 = 1.2;

/// LCS length by the classic two-row dynamic program.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_beta(p: f64, r: f64) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let denom = r + b2 * p;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

/// Mean over pairs of the best per-reference LCS F-measure.
pub fn rouge_l<T: Eq>(pairs: &[EvalPair<T>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for pair in pairs {
        let mut best = 0.0f64;
        for r in &pair.references {
            if pair.candidate.is_empty() || r.is_empty() {
                continue;
            }
            let l = lcs_len(&pair.candidate, r) as f64;
            let p = l / pair.candidate.len() as f64;
            let rec = l / r.len() as f64;
            best = best.max(f_beta(p, rec));
        }
        sum += best;
    }
    sum / pairs.len() as f64
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
    fn identity_pair_scores_one() {
        let s = rouge_l(&[pair(&["a", "b", "c"], &["a", "b", "c"])]);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_fixture() {
        // LCS("a b c d", "a c d") = 3: P = 3/4, R = 1.
        let s = rouge_l(&[pair(&["a", "b", "c", "d"], &["a", "c", "d"])]);
        let b2 = 1.2f64 * 1.2;
        let expect = (1.0 + b2) * 0.75 * 1.0 / (1.0 + b2 * 0.75);
        assert!((s - expect).abs() < 1e-12, "got {}, want {}", s, expect);
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        assert_eq!(rouge_l(&[pair(&["a", "b"], &["c", "d"])]), 0.0);
    }

    #[test]
    fn lcs_is_order_sensitive() {
        assert_eq!(lcs_len(&["a", "b", "c"], &["c", "b", "a"]), 1);
        assert_eq!(lcs_len(&["a", "b", "c"], &["a", "x", "b", "y", "c"]), 3);
        assert_eq!(lcs_len::<u32>(&[], &[1, 2]), 0);
    }

    #[test]
    fn multiple_references_take_the_best() {
        let p = EvalPair::new(
            vec!["a", "b", "c"],
            vec![vec!["x", "y"], vec!["a", "b", "c"]],
        );
        assert!((rouge_l(&[p]) - 1.0).abs() < 1e-12);
    }
}
