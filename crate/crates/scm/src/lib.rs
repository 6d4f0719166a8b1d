//! Exact discrete structural causal models.
//!
//! Supports observational conditionals, graph-surgery interventions, and
//! the back-door and front-door adjustment formulas, all by full joint
//! enumeration. Surgery is the oracle; the adjustments must match it, and
//! the front-door path provably never touches the confounder's CPT thanks
//! to per-node access counters and a cached observational joint.

pub mod criterion;
pub mod dist;
pub mod model;
pub mod query;
pub mod random;
pub mod verify;

pub use criterion::{verify_frontdoor_criterion, CriterionReport, FrontdoorCondition, Violation};
pub use dist::Dist;
pub use model::{DiscreteScm, ScmBuilder, MAX_CARD, MAX_NODES};
pub use random::{random_backdoor_scm, random_dag_scm, random_frontdoor_scm};
pub use verify::{run_backdoor_trials, run_frontdoor_trials, VerifySummary, ADJUSTMENT_TOL};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("unknown variable {0}")]
    UnknownVar(String),
    #[error("duplicate variable {0}")]
    DuplicateVar(String),
    #[error("graph contains a cycle (involving {0})")]
    Cyclic(String),
    #[error("cardinality {card} of {node} outside 1..=8")]
    BadCardinality { node: String, card: usize },
    #[error("CPT of {node}: expected {expected} entries, got {got}")]
    CptRows {
        node: String,
        expected: usize,
        got: usize,
    },
    #[error("CPT row {row} of {node} sums to {sum}, not 1")]
    CptRowSum { node: String, row: usize, sum: f64 },
    #[error("negative probability in CPT of {0}")]
    CptNegative(String),
    #[error("too many nodes: {0} > 8")]
    TooManyNodes(usize),
    #[error("value {value} out of range for {node} (cardinality {card})")]
    ValueOutOfRange {
        node: String,
        value: usize,
        card: usize,
    },
    #[error("conditioning event {0} has probability zero")]
    ZeroProbabilityEvent(String),
    #[error("negative mass for {0}")]
    NegativeMass(String),
    #[error("non-identifiable stratum: P({x}, {stratum}) = 0 while the stratum has positive probability")]
    NonIdentifiableStratum { x: String, stratum: String },
    #[error("front-door criterion violated: {0}")]
    CriterionViolated(String),
}
