//! Batch verification of adjustment formulas against graph surgery.

use serde::Serialize;
use strata_tensor::rng::derive_seed;

use crate::random::{random_backdoor_scm, random_frontdoor_scm};
use crate::ScmError;

/// Agreement tolerance between adjustment formulas and the surgery oracle.
pub const ADJUSTMENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub trials: usize,
    pub max_abs_error: f64,
    pub failures: usize,
}

/// Runs `trials` seeded random front-door SCMs, comparing frontdoor_adjust
/// against surgery_intervene for every do(X=x). The joint is warmed first,
/// so the adjustment path performs zero CPT reads.
pub fn run_frontdoor_trials(trials: usize, seed: u64) -> Result<VerifySummary, ScmError> {
    let mut max_abs_error = 0.0f64;
    let mut failures = 0usize;
    for t in 0..trials {
        let scm = random_frontdoor_scm(derive_seed(seed, &format!("trial-{t}")));
        scm.warm_joint();
        let x_card = scm.cardinality(scm.node_id("X")?);
        let mut trial_err = 0.0f64;
        let mut touched_cpt = false;
        for x in 0..x_card {
            scm.reset_cpt_counters();
            let fd = scm.frontdoor_adjust(("X", x), "M", "Y")?;
            touched_cpt |= scm.total_cpt_reads() > 0;
            let oracle = scm.surgery_intervene(&[("X", x)], "Y")?;
            trial_err = trial_err.max(fd.max_abs_diff(&oracle));
        }
        max_abs_error = max_abs_error.max(trial_err);
        if trial_err > ADJUSTMENT_TOL || touched_cpt {
            failures += 1;
        }
    }
    Ok(VerifySummary {
        trials,
        max_abs_error,
        failures,
    })
}

/// Runs `trials` seeded random confounded triangles, comparing
/// backdoor_adjust over the observed confounder against surgery_intervene.
pub fn run_backdoor_trials(trials: usize, seed: u64) -> Result<VerifySummary, ScmError> {
    let mut max_abs_error = 0.0f64;
    let mut failures = 0usize;
    for t in 0..trials {
        let scm = random_backdoor_scm(derive_seed(seed, &format!("trial-{t}")));
        let x_card = scm.cardinality(scm.node_id("X")?);
        let mut trial_err = 0.0f64;
        for x in 0..x_card {
            let bd = scm.backdoor_adjust(("X", x), "Y", &["Z"])?;
            let oracle = scm.surgery_intervene(&[("X", x)], "Y")?;
            trial_err = trial_err.max(bd.max_abs_diff(&oracle));
        }
        max_abs_error = max_abs_error.max(trial_err);
        if trial_err > ADJUSTMENT_TOL {
            failures += 1;
        }
    }
    Ok(VerifySummary {
        trials,
        max_abs_error,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_batch_has_no_failures() {
        let s = run_frontdoor_trials(10, 123).unwrap();
        assert_eq!(s.trials, 10);
        assert_eq!(s.failures, 0);
        assert!(s.max_abs_error <= ADJUSTMENT_TOL);
    }

    #[test]
    fn backdoor_batch_has_no_failures() {
        let s = run_backdoor_trials(10, 123).unwrap();
        assert_eq!(s.trials, 10);
        assert_eq!(s.failures, 0);
        assert!(s.max_abs_error <= ADJUSTMENT_TOL);
    }
}
