//! Seeded random SCM generators for property testing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use strata_tensor::rng::stream_indexed;

use crate::model::{DiscreteScm, ScmBuilder};

/// Symmetric Dirichlet(alpha = 1) draw: normalized unit exponentials. Full
/// support with probability 1, so conditioning events stay positive.
pub fn dirichlet_row(rng: &mut ChaCha8Rng, card: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..card)
        .map(|_| -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln())
        .collect();
    let total: f64 = row.iter().sum();
    for v in &mut row {
        *v /= total;
    }
    row
}

fn rows(rng: &mut ChaCha8Rng, n_rows: usize, card: usize) -> Vec<Vec<f64>> {
    (0..n_rows).map(|_| dirichlet_row(rng, card)).collect()
}

/// Canonical front-door structure Z -> X -> M -> Y with Z -> Y, random
/// full-support CPTs, all variables binary.
pub fn random_frontdoor_scm(seed: u64) -> DiscreteScm {
    random_frontdoor_scm_with_cards(seed, 2, 2, 2, 2)
}

/// Front-door structure with chosen cardinalities.
pub fn random_frontdoor_scm_with_cards(
    seed: u64,
    cz: usize,
    cx: usize,
    cm: usize,
    cy: usize,
) -> DiscreteScm {
    let mut rng = stream_indexed(seed, "scm-frontdoor", 0);
    ScmBuilder::new()
        .node("Z", cz, &[], rows(&mut rng, 1, cz))
        .node("X", cx, &["Z"], rows(&mut rng, cz, cx))
        .node("M", cm, &["X"], rows(&mut rng, cx, cm))
        .node("Y", cy, &["M", "Z"], rows(&mut rng, cm * cz, cy))
        .build()
        .expect("canonical front-door structure is valid")
}

/// Confounded triangle Z -> X, Z -> Y, X -> Y with random CPTs; Z is the
/// full back-door adjustment set.
pub fn random_backdoor_scm(seed: u64) -> DiscreteScm {
    let mut rng = stream_indexed(seed, "scm-backdoor", 0);
    let cz = rng.random_range(2..=3);
    let cx = rng.random_range(2..=3);
    let cy = rng.random_range(2..=3);
    ScmBuilder::new()
        .node("Z", cz, &[], rows(&mut rng, 1, cz))
        .node("X", cx, &["Z"], rows(&mut rng, cz, cx))
        .node("Y", cy, &["X", "Z"], rows(&mut rng, cx * cz, cy))
        .build()
        .expect("confounded triangle is valid")
}

/// Random DAG over `n` nodes (edges only from lower to higher index, each
/// present with probability 1/2), random cardinalities 2..=3.
pub fn random_dag_scm(seed: u64, n: usize) -> DiscreteScm {
    let mut rng = stream_indexed(seed, "scm-dag", 0);
    let cards: Vec<usize> = (0..n).map(|_| rng.random_range(2..=3)).collect();
    let names: Vec<String> = (0..n).map(|i| format!("V{i}")).collect();
    let mut b = ScmBuilder::new();
    for i in 0..n {
        let parent_ids: Vec<usize> = (0..i).filter(|_| rng.random::<f64>() < 0.5).collect();
        let parent_names: Vec<&str> = parent_ids.iter().map(|&p| names[p].as_str()).collect();
        let n_rows: usize = parent_ids.iter().map(|&p| cards[p]).product();
        let table = rows(&mut rng, n_rows, cards[i]);
        b = b.node(&names[i], cards[i], &parent_names, table);
    }
    b.build().expect("indexed-edge construction is acyclic")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_rows_are_normalized_and_positive() {
        let mut rng = stream_indexed(9, "t", 0);
        for card in 1..=8 {
            let row = dirichlet_row(&mut rng, card);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = random_frontdoor_scm(77);
        let b = random_frontdoor_scm(77);
        assert_eq!(a.joint(), b.joint());
    }

    #[test]
    fn random_dag_builds_for_all_small_sizes() {
        for n in 1..=6 {
            let scm = random_dag_scm(13 + n as u64, n);
            assert_eq!(scm.node_count(), n);
            let total: f64 = scm.joint().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
