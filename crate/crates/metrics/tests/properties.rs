//! Cross-metric properties on randomized report-shaped corpora.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strata_metrics::{bleu, cider, compute_report, meteor_lite, rouge_l, CiderVariant, EvalPair};

/// Clause-shaped corpus: sentences like report text, with some token overlap
/// between candidate and reference.
fn random_corpus(seed: u64, pairs: usize) -> Vec<EvalPair<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pairs)
        .map(|_| {
            let len = rng.random_range(4..12);
            let reference: Vec<u32> = (0..len).map(|_| rng.random_range(0..30)).collect();
            let mut candidate = reference.clone();
            // Corrupt a few tokens and occasionally drop one.
            for _ in 0..rng.random_range(0..4) {
                let i = rng.random_range(0..candidate.len());
                candidate[i] = rng.random_range(0..30);
            }
            if candidate.len() > 4 && rng.random_bool(0.3) {
                candidate.pop();
            }
            EvalPair::new(candidate, vec![reference])
        })
        .collect()
}

#[test]
fn identity_corpus_hits_documented_maxima() {
    let pairs: Vec<EvalPair<u32>> = (0..8)
        .map(|i| {
            let doc: Vec<u32> = vec![100 + i, 1, 2, 3, 4, i];
            EvalPair::new(doc.clone(), vec![doc])
        })
        .collect();
    let r = compute_report(&pairs);
    for (name, v) in [
        ("bleu1", r.bleu1),
        ("bleu2", r.bleu2),
        ("bleu3", r.bleu3),
        ("bleu4", r.bleu4),
        ("rouge_l", r.rouge_l),
    ] {
        assert!((v - 1.0).abs() < 1e-9, "{} = {}", name, v);
    }
    assert!((r.cider - 10.0).abs() < 1e-9, "cider = {}", r.cider);
    // Six tokens, one chunk.
    let expect_meteor = 1.0 - 0.5 / 216.0;
    assert!((r.meteor_lite - expect_meteor).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_stay_in_documented_ranges(seed in 0u64..5000) {
        let corpus = random_corpus(seed, 6);
        let r = compute_report(&corpus);
        for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.meteor_lite] {
            prop_assert!((0.0..=1.0).contains(&v), "metric out of range: {}", v);
        }
        prop_assert!(r.cider >= 0.0);
    }

    #[test]
    fn pair_order_never_matters(seed in 0u64..5000) {
        let corpus = random_corpus(seed, 8);
        let mut shuffled = corpus.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
        shuffled.shuffle(&mut rng);
        let a = compute_report(&corpus);
        let b = compute_report(&shuffled);
        for (x, y) in [
            (a.bleu1, b.bleu1),
            (a.bleu4, b.bleu4),
            (a.rouge_l, b.rouge_l),
            (a.meteor_lite, b.meteor_lite),
            (a.cider, b.cider),
        ] {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn bleu_is_monotone_in_order_under_unit_brevity(seed in 0u64..5000) {
        // Equal-length candidates force BP = 1; the geometric mean over a
        // longer prefix of non-increasing precisions cannot grow.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus: Vec<EvalPair<u32>> = (0..6)
            .map(|_| {
                let len = rng.random_range(5..10);
                let reference: Vec<u32> = (0..len).map(|_| rng.random_range(0..12)).collect();
                let mut candidate = reference.clone();
                for _ in 0..rng.random_range(0..3) {
                    let i = rng.random_range(0..candidate.len());
                    candidate[i] = rng.random_range(0..12);
                }
                EvalPair::new(candidate, vec![reference])
            })
            .collect();
        let scores: Vec<f64> = (1..=4).map(|n| bleu(&corpus, n).unwrap()).collect();
        for w in scores.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", scores);
        }
    }

    #[test]
    fn rouge_and_meteor_reward_the_exact_match(seed in 0u64..5000) {
        let corpus = random_corpus(seed, 4);
        let exact: Vec<EvalPair<u32>> = corpus
            .iter()
            .map(|p| EvalPair::new(p.references[0].clone(), p.references.clone()))
            .collect();
        prop_assert!(rouge_l(&exact) >= rouge_l(&corpus) - 1e-12);
        prop_assert!(meteor_lite(&exact) >= meteor_lite(&corpus) - 1e-12);
        prop_assert!(
            cider(&exact, CiderVariant::Plain) >= cider(&corpus, CiderVariant::Plain) - 1e-9
        );
    }
}
