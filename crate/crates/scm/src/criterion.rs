//! Structural front-door criterion check with named violation paths.
//!
//! The three conditions, checked purely on the DAG:
//! (i)   the mediator intercepts every directed path from X to Y;
//! (ii)  X has no unblocked back-door path to the mediator (empty
//!       conditioning set);
//! (iii) every back-door path from the mediator to Y is blocked by {X}.

use std::collections::BTreeSet;
use std::fmt;

use crate::model::DiscreteScm;
use crate::ScmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontdoorCondition {
    /// (i) a directed X -> Y path avoids the mediator.
    Interception,
    /// (ii) an unblocked back-door path runs from X to the mediator.
    BackdoorToMediator,
    /// (iii) a back-door path from the mediator to Y is not blocked by X.
    MediatorBackdoorToTarget,
}

impl fmt::Display for FrontdoorCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrontdoorCondition::Interception => write!(f, "(i) unintercepted directed path"),
            FrontdoorCondition::BackdoorToMediator => {
                write!(f, "(ii) back-door path into mediator")
            }
            FrontdoorCondition::MediatorBackdoorToTarget => {
                write!(f, "(iii) mediator back-door path not blocked by X")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub condition: FrontdoorCondition,
    /// Offending path as variable names, endpoints included.
    pub path: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CriterionReport {
    pub violations: Vec<Violation>,
}

impl CriterionReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return write!(f, "front-door criterion satisfied");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{} [{}]", v.condition, v.path.join(" - ")))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn descendants(scm: &DiscreteScm, node: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        for &c in scm.children(n) {
            if out.insert(c) {
                stack.push(c);
            }
        }
    }
    out
}

/// All directed simple paths from `from` to `to`.
fn directed_paths(scm: &DiscreteScm, from: usize, to: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut path = vec![from];
    fn dfs(
        scm: &DiscreteScm,
        at: usize,
        to: usize,
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if at == to {
            out.push(path.clone());
            return;
        }
        for &c in scm.children(at) {
            if !path.contains(&c) {
                path.push(c);
                dfs(scm, c, to, path, out);
                path.pop();
            }
        }
    }
    dfs(scm, from, to, &mut path, &mut out);
    out
}

/// All undirected simple paths between `from` and `to` over the skeleton.
fn undirected_paths(scm: &DiscreteScm, from: usize, to: usize) -> Vec<Vec<usize>> {
    let neighbors = |n: usize| -> Vec<usize> {
        let mut v: Vec<usize> = scm.parents(n).to_vec();
        v.extend_from_slice(scm.children(n));
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut out = Vec::new();
    let mut path = vec![from];
    fn dfs(
        neighbors: &dyn Fn(usize) -> Vec<usize>,
        at: usize,
        to: usize,
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if at == to {
            out.push(path.clone());
            return;
        }
        for c in neighbors(at) {
            if !path.contains(&c) {
                path.push(c);
                dfs(neighbors, c, to, path, out);
                path.pop();
            }
        }
    }
    dfs(&neighbors, from, to, &mut path, &mut out);
    out
}

/// d-separation blocking test for one path given a conditioning set.
fn path_blocked(scm: &DiscreteScm, path: &[usize], cond: &BTreeSet<usize>) -> bool {
    for i in 1..path.len() - 1 {
        let (prev, v, next) = (path[i - 1], path[i], path[i + 1]);
        let collider = scm.has_edge(prev, v) && scm.has_edge(next, v);
        if collider {
            let opens = cond.contains(&v) || descendants(scm, v).iter().any(|d| cond.contains(d));
            if !opens {
                return true;
            }
        } else if cond.contains(&v) {
            return true;
        }
    }
    false
}

/// True when the path leaves `endpoint` through an incoming edge.
fn is_backdoor_at(scm: &DiscreteScm, path: &[usize], endpoint: usize) -> bool {
    debug_assert_eq!(path[0], endpoint);
    path.len() > 1 && scm.has_edge(path[1], endpoint)
}

pub fn verify_frontdoor_criterion(
    scm: &DiscreteScm,
    x: &str,
    mediator: &str,
    target: &str,
) -> Result<CriterionReport, ScmError> {
    let xi = scm.node_id(x)?;
    let mi = scm.node_id(mediator)?;
    let yi = scm.node_id(target)?;
    let name_path = |p: &[usize]| p.iter().map(|&n| scm.name(n).to_string()).collect();
    let mut report = CriterionReport::default();

    // (i) every directed X -> Y path passes through the mediator
    for p in directed_paths(scm, xi, yi) {
        if !p.contains(&mi) {
            report.violations.push(Violation {
                condition: FrontdoorCondition::Interception,
                path: name_path(&p),
            });
        }
    }

    // (ii) no unblocked back-door path from X to the mediator
    let empty = BTreeSet::new();
    for p in undirected_paths(scm, xi, mi) {
        if is_backdoor_at(scm, &p, xi) && !path_blocked(scm, &p, &empty) {
            report.violations.push(Violation {
                condition: FrontdoorCondition::BackdoorToMediator,
                path: name_path(&p),
            });
        }
    }

    // (iii) X blocks every back-door path from the mediator to Y
    let cond_x: BTreeSet<usize> = [xi].into_iter().collect();
    for p in undirected_paths(scm, mi, yi) {
        if is_backdoor_at(scm, &p, mi) && !path_blocked(scm, &p, &cond_x) {
            report.violations.push(Violation {
                condition: FrontdoorCondition::MediatorBackdoorToTarget,
                path: name_path(&p),
            });
        }
    }

    Ok(report)
}
