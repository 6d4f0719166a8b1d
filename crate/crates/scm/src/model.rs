//! Discrete structural causal model over named finite variables.
//!
//! Exact enumeration only: node count and cardinalities are capped at 8, so
//! the full joint always fits in memory. Every CPT read goes through a
//! counting accessor, which lets tests prove which tables a query touched.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use crate::ScmError;

pub const MAX_NODES: usize = 8;
pub const MAX_CARD: usize = 8;
pub const CPT_ROW_TOL: f64 = 1e-12;

/// Full assignment indexed by node id.
pub type FullAssignment = Vec<usize>;

pub struct DiscreteScm {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    card: Vec<usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    /// cpt[n][row][v] = P(n = v | parents(n) = row), rows in mixed-radix
    /// order with the first listed parent most significant.
    cpt: Vec<Vec<Vec<f64>>>,
    topo: Vec<usize>,
    reads: Vec<AtomicU64>,
    joint: OnceLock<Vec<f64>>,
}

impl Clone for DiscreteScm {
    fn clone(&self) -> Self {
        DiscreteScm {
            names: self.names.clone(),
            index: self.index.clone(),
            card: self.card.clone(),
            parents: self.parents.clone(),
            children: self.children.clone(),
            cpt: self.cpt.clone(),
            topo: self.topo.clone(),
            reads: self.names.iter().map(|_| AtomicU64::new(0)).collect(),
            joint: OnceLock::new(),
        }
    }
}

impl DiscreteScm {
    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn node_id(&self, name: &str) -> Result<usize, ScmError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ScmError::UnknownVar(name.to_string()))
    }

    pub fn cardinality(&self, id: usize) -> usize {
        self.card[id]
    }

    pub fn parents(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].contains(&from)
    }

    /// Topological order (parents before children).
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Counted CPT row access. All query code must read tables through
    /// here so the access counters stay truthful.
    pub fn cpt_row(&self, node: usize, assignment: &FullAssignment) -> &[f64] {
        self.reads[node].fetch_add(1, Ordering::Relaxed);
        let mut row = 0usize;
        for &p in &self.parents[node] {
            row = row * self.card[p] + assignment[p];
        }
        &self.cpt[node][row]
    }

    pub fn cpt_reads(&self, node: usize) -> u64 {
        self.reads[node].load(Ordering::Relaxed)
    }

    pub fn total_cpt_reads(&self) -> u64 {
        self.reads.iter().map(|r| r.load(Ordering::Relaxed)).sum()
    }

    pub fn reset_cpt_counters(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    /// Size of the full assignment space.
    pub fn joint_size(&self) -> usize {
        self.card.iter().product()
    }

    pub fn index_to_assignment(&self, mut idx: usize) -> FullAssignment {
        let mut a = vec![0usize; self.card.len()];
        for i in (0..self.card.len()).rev() {
            a[i] = idx % self.card[i];
            idx /= self.card[i];
        }
        a
    }

    pub fn assignment_to_index(&self, a: &FullAssignment) -> usize {
        let mut idx = 0usize;
        for i in 0..self.card.len() {
            idx = idx * self.card[i] + a[i];
        }
        idx
    }

    /// Observational joint table, built once from the CPTs and cached.
    /// Building it is the model's "data collection" step: adjustment
    /// formulas afterwards consume only this table, never the CPTs.
    pub fn joint(&self) -> &[f64] {
        self.joint.get_or_init(|| {
            let size = self.joint_size();
            let mut j = vec![0.0f64; size];
            for (idx, slot) in j.iter_mut().enumerate() {
                let a = self.index_to_assignment(idx);
                let mut p = 1.0;
                for n in 0..self.names.len() {
                    p *= self.cpt_row(n, &a)[a[n]];
                }
                *slot = p;
            }
            j
        })
    }

    /// Forces the joint cache so later queries perform zero CPT reads.
    pub fn warm_joint(&self) {
        let _ = self.joint();
    }

    pub fn joint_is_warm(&self) -> bool {
        self.joint.get().is_some()
    }
}

#[derive(Default)]
pub struct ScmBuilder {
    nodes: Vec<(String, usize, Vec<String>, Vec<Vec<f64>>)>,
}

impl ScmBuilder {
    pub fn new() -> Self {
        ScmBuilder { nodes: Vec::new() }
    }

    /// Adds a node. `cpt` rows are indexed by the parent assignment in the
    /// given parent order, first parent most significant.
    pub fn node(mut self, name: &str, card: usize, parents: &[&str], cpt: Vec<Vec<f64>>) -> Self {
        self.nodes.push((
            name.to_string(),
            card,
            parents.iter().map(|s| s.to_string()).collect(),
            cpt,
        ));
        self
    }

    pub fn build(self) -> Result<DiscreteScm, ScmError> {
        if self.nodes.len() > MAX_NODES {
            return Err(ScmError::TooManyNodes(self.nodes.len()));
        }
        let names: Vec<String> = self.nodes.iter().map(|n| n.0.clone()).collect();
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(ScmError::DuplicateVar(n.clone()));
            }
        }
        let mut card = Vec::new();
        let mut parents: Vec<Vec<usize>> = Vec::new();
        let mut cpt = Vec::new();
        for (name, c, ps, table) in &self.nodes {
            if !(1..=MAX_CARD).contains(c) {
                return Err(ScmError::BadCardinality {
                    node: name.clone(),
                    card: *c,
                });
            }
            let pids: Vec<usize> = ps
                .iter()
                .map(|p| {
                    index
                        .get(p)
                        .copied()
                        .ok_or_else(|| ScmError::UnknownVar(p.clone()))
                })
                .collect::<Result<_, _>>()?;
            card.push(*c);
            parents.push(pids);
            cpt.push(table.clone());
        }
        // rows per node = product of parent cardinalities
        for n in 0..names.len() {
            let rows: usize = parents[n].iter().map(|&p| card[p]).product();
            if cpt[n].len() != rows {
                return Err(ScmError::CptRows {
                    node: names[n].clone(),
                    expected: rows,
                    got: cpt[n].len(),
                });
            }
            for (r, row) in cpt[n].iter().enumerate() {
                if row.len() != card[n] {
                    return Err(ScmError::CptRows {
                        node: names[n].clone(),
                        expected: card[n],
                        got: row.len(),
                    });
                }
                if row.iter().any(|&v| v < 0.0) {
                    return Err(ScmError::CptNegative(names[n].clone()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > CPT_ROW_TOL {
                    return Err(ScmError::CptRowSum {
                        node: names[n].clone(),
                        row: r,
                        sum,
                    });
                }
            }
        }
        let topo = toposort(&parents).ok_or_else(|| {
            // name a node on a cycle for the report
            ScmError::Cyclic(names[0].clone())
        })?;
        let mut children = vec![Vec::new(); names.len()];
        for (n, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(n);
            }
        }
        let reads = names.iter().map(|_| AtomicU64::new(0)).collect();
        Ok(DiscreteScm {
            names,
            index,
            card,
            parents,
            children,
            cpt,
            topo,
            reads,
            joint: OnceLock::new(),
        })
    }
}

fn toposort(parents: &[Vec<usize>]) -> Option<Vec<usize>> {
    let n = parents.len();
    let mut indeg: Vec<usize> = (0..n).map(|node| parents[node].len()).collect();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (node, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(node);
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(next) = queue.pop() {
        order.push(next);
        for &c in &children[next] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push(c);
            }
        }
    }
    (order.len() == n).then_some(order)
}
