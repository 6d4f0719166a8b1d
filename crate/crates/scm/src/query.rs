//! Observational, interventional, and adjustment queries.
//!
//! `surgery_intervene` is the ground-truth oracle: it mutilates the graph
//! and re-enumerates from the CPTs. The two adjustment formulas consume
//! only the cached observational joint, which is what makes the
//! "front door never reads the confounder's table" property checkable.

use crate::criterion::verify_frontdoor_criterion;
use crate::dist::Dist;
use crate::model::DiscreteScm;
use crate::ScmError;

impl DiscreteScm {
    fn resolve(&self, pairs: &[(&str, usize)]) -> Result<Vec<(usize, usize)>, ScmError> {
        pairs
            .iter()
            .map(|&(name, value)| {
                let id = self.node_id(name)?;
                if value >= self.cardinality(id) {
                    return Err(ScmError::ValueOutOfRange {
                        node: name.to_string(),
                        value,
                        card: self.cardinality(id),
                    });
                }
                Ok((id, value))
            })
            .collect()
    }

    /// Marginal mass of `target` over joint entries consistent with
    /// `given`, unnormalized.
    fn mass_from_joint(&self, target: usize, given: &[(usize, usize)]) -> Vec<f64> {
        let joint = self.joint();
        let mut mass = vec![0.0f64; self.cardinality(target)];
        for (idx, &p) in joint.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let a = self.index_to_assignment(idx);
            if given.iter().all(|&(n, v)| a[n] == v) {
                mass[a[target]] += p;
            }
        }
        mass
    }

    fn event_prob(&self, given: &[(usize, usize)]) -> f64 {
        let joint = self.joint();
        let mut total = 0.0;
        for (idx, &p) in joint.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let a = self.index_to_assignment(idx);
            if given.iter().all(|&(n, v)| a[n] == v) {
                total += p;
            }
        }
        total
    }

    /// Exact conditional P(target | given) by joint enumeration.
    pub fn observational(&self, target: &str, given: &[(&str, usize)]) -> Result<Dist, ScmError> {
        let t = self.node_id(target)?;
        let g = self.resolve(given)?;
        Dist::from_mass(target, self.mass_from_joint(t, &g))
    }

    /// Graph surgery: every intervened node's CPT becomes a point mass and
    /// its incoming edges are severed; the target is then marginalized
    /// exactly. Reads CPTs fresh on every call.
    pub fn surgery_intervene(
        &self,
        do_assign: &[(&str, usize)],
        target: &str,
    ) -> Result<Dist, ScmError> {
        let t = self.node_id(target)?;
        let dov = self.resolve(do_assign)?;
        let is_done = |n: usize| dov.iter().find(|&&(d, _)| d == n).map(|&(_, v)| v);
        let size = self.joint_size();
        let mut mass = vec![0.0f64; self.cardinality(t)];
        for idx in 0..size {
            let a = self.index_to_assignment(idx);
            if dov.iter().any(|&(n, v)| a[n] != v) {
                continue;
            }
            let mut p = 1.0;
            for n in 0..self.node_count() {
                if is_done(n).is_some() {
                    continue; // point mass contributes factor 1 at the pinned value
                }
                p *= self.cpt_row(n, &a)[a[n]];
                if p == 0.0 {
                    break;
                }
            }
            mass[a[t]] += p;
        }
        Dist::from_mass(target, mass)
    }

    /// Back-door adjustment: sum_z P(target | x, z) P(z).
    pub fn backdoor_adjust(
        &self,
        x: (&str, usize),
        target: &str,
        adjust_set: &[&str],
    ) -> Result<Dist, ScmError> {
        let t = self.node_id(target)?;
        let xv = self.resolve(&[x])?[0];
        let zs: Vec<usize> = adjust_set
            .iter()
            .map(|z| self.node_id(z))
            .collect::<Result<_, _>>()?;
        if zs.is_empty() {
            return Dist::from_mass(target, self.mass_from_joint(t, &[xv]));
        }
        let mut out = vec![0.0f64; self.cardinality(t)];
        let strata: usize = zs.iter().map(|&z| self.cardinality(z)).product();
        for s in 0..strata {
            let mut rem = s;
            let mut z_assign: Vec<(usize, usize)> = Vec::with_capacity(zs.len());
            for &z in zs.iter().rev() {
                z_assign.push((z, rem % self.cardinality(z)));
                rem /= self.cardinality(z);
            }
            z_assign.reverse();
            let pz = self.event_prob(&z_assign);
            if pz == 0.0 {
                continue;
            }
            let mut cond = z_assign.clone();
            cond.push(xv);
            let joint_xz = self.event_prob(&cond);
            if joint_xz == 0.0 {
                return Err(ScmError::NonIdentifiableStratum {
                    x: format!("{}={}", x.0, x.1),
                    stratum: z_assign
                        .iter()
                        .map(|&(n, v)| format!("{}={v}", self.name(n)))
                        .collect::<Vec<_>>()
                        .join(","),
                });
            }
            let mass = self.mass_from_joint(t, &cond);
            for (o, m) in out.iter_mut().zip(mass) {
                *o += pz * m / joint_xz;
            }
        }
        Dist::from_mass(target, out)
    }

    /// Front-door adjustment:
    /// sum_m P(M=m | X=x) sum_x' P(X=x') P(target | X=x', M=m).
    /// Checks the structural criterion first, then evaluates purely from
    /// the cached observational joint.
    pub fn frontdoor_adjust(
        &self,
        x: (&str, usize),
        mediator: &str,
        target: &str,
    ) -> Result<Dist, ScmError> {
        let report = verify_frontdoor_criterion(self, x.0, mediator, target)?;
        if !report.ok() {
            return Err(ScmError::CriterionViolated(report.to_string()));
        }
        let t = self.node_id(target)?;
        let m = self.node_id(mediator)?;
        let xid = self.node_id(x.0)?;
        let xv = self.resolve(&[x])?[0];

        let p_x_event = self.event_prob(&[xv]);
        if p_x_event == 0.0 {
            return Err(ScmError::ZeroProbabilityEvent(format!("{}={}", x.0, x.1)));
        }
        let m_mass = self.mass_from_joint(m, &[xv]); // unnormalized P(M, X=x)
        let x_marg = self.mass_from_joint(xid, &[]);
        let mut out = vec![0.0f64; self.cardinality(t)];
        for mv in 0..self.cardinality(m) {
            let p_m_given_x = m_mass[mv] / p_x_event;
            if p_m_given_x == 0.0 {
                continue;
            }
            for (xhat, &p_xhat) in x_marg.iter().enumerate() {
                if p_xhat == 0.0 {
                    continue;
                }
                let cond = [(xid, xhat), (m, mv)];
                let denom = self.event_prob(&cond);
                if denom == 0.0 {
                    // Empty stratum: P(target | x', m) is undefined there.
                    // Skipping it and renormalizing at the end reproduces
                    // the deterministic-mediator collapse P(Y | M = x); on
                    // full-support models no stratum is ever skipped.
                    continue;
                }
                let y_mass = self.mass_from_joint(t, &cond);
                for (o, ym) in out.iter_mut().zip(y_mass) {
                    *o += p_m_given_x * p_xhat * ym / denom;
                }
            }
        }
        Dist::from_mass(target, out)
    }
}

#[cfg(test)]
mod tests {
    use crate::model::ScmBuilder;

    fn uniform_row(card: usize) -> Vec<f64> {
        vec![1.0 / card as f64; card]
    }

    #[test]
    fn observational_reads_cpt_directly() {
        let scm = ScmBuilder::new()
            .node("X", 2, &[], vec![vec![0.5, 0.5]])
            .node("Y", 2, &["X"], vec![vec![0.3, 0.7], vec![0.3, 0.7]])
            .build()
            .unwrap();
        let d = scm.observational("Y", &[("X", 0)]).unwrap();
        assert!((d.probs[0] - 0.3).abs() < 1e-12);
        assert!((d.probs[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn deterministic_chain_gives_point_mass() {
        let scm = ScmBuilder::new()
            .node("X", 2, &[], vec![vec![0.5, 0.5]])
            .node("M", 2, &["X"], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
            .node("Y", 2, &["M"], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
            .build()
            .unwrap();
        let d = scm.observational("Y", &[("X", 1)]).unwrap();
        assert_eq!(d.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn surgery_on_exogenous_x_equals_observational() {
        let scm = ScmBuilder::new()
            .node("X", 2, &[], vec![vec![0.3, 0.7]])
            .node("Y", 3, &["X"], vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]])
            .build()
            .unwrap();
        for x in 0..2 {
            let s = scm.surgery_intervene(&[("X", x)], "Y").unwrap();
            let o = scm.observational("Y", &[("X", x)]).unwrap();
            assert!(s.max_abs_diff(&o) < 1e-12);
        }
    }

    #[test]
    fn surgery_on_irrelevant_node_equals_marginal() {
        // X <- Z -> Y, X has no edge to Y
        let scm = ScmBuilder::new()
            .node("Z", 2, &[], vec![vec![0.4, 0.6]])
            .node("X", 2, &["Z"], vec![vec![0.9, 0.1], vec![0.2, 0.8]])
            .node("Y", 2, &["Z"], vec![vec![0.7, 0.3], vec![0.1, 0.9]])
            .build()
            .unwrap();
        let s = scm.surgery_intervene(&[("X", 1)], "Y").unwrap();
        let marg = scm.observational("Y", &[]).unwrap();
        assert!(s.max_abs_diff(&marg) < 1e-12);
    }

    #[test]
    fn vacuous_adjustment_reduces_to_observational() {
        // Z independent of everything
        let scm = ScmBuilder::new()
            .node("Z", 2, &[], vec![vec![0.5, 0.5]])
            .node("X", 2, &[], vec![vec![0.3, 0.7]])
            .node("Y", 2, &["X"], vec![vec![0.8, 0.2], vec![0.25, 0.75]])
            .build()
            .unwrap();
        let adj = scm.backdoor_adjust(("X", 1), "Y", &["Z"]).unwrap();
        let obs = scm.observational("Y", &[("X", 1)]).unwrap();
        assert!(adj.max_abs_diff(&obs) < 1e-12);
        let empty = scm.backdoor_adjust(("X", 1), "Y", &[]).unwrap();
        assert!(empty.max_abs_diff(&obs) < 1e-12);
    }

    #[test]
    fn frontdoor_with_constant_confounder_equals_observational() {
        let scm = ScmBuilder::new()
            .node("Z", 1, &[], vec![vec![1.0]])
            .node("X", 2, &["Z"], vec![vec![0.4, 0.6]])
            .node("M", 2, &["X"], vec![vec![0.8, 0.2], vec![0.3, 0.7]])
            .node("Y", 2, &["M", "Z"], vec![vec![0.9, 0.1], vec![0.2, 0.8]])
            .build()
            .unwrap();
        let fd = scm.frontdoor_adjust(("X", 0), "M", "Y").unwrap();
        let obs = scm.observational("Y", &[("X", 0)]).unwrap();
        assert!(fd.max_abs_diff(&obs) < 1e-10);
    }

    #[test]
    fn frontdoor_collapses_when_mediator_copies_x() {
        // M = X deterministically, Y depends only on M; front door equals
        // P(Y | M = x).
        let scm = ScmBuilder::new()
            .node("Z", 2, &[], vec![vec![0.35, 0.65]])
            .node(
                "X",
                2,
                &["Z"],
                vec![vec![0.75, 0.25], vec![0.15, 0.85]],
            )
            .node("M", 2, &["X"], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
            .node(
                "Y",
                2,
                &["M", "Z"],
                vec![
                    vec![0.6, 0.4],
                    vec![0.6, 0.4],
                    vec![0.1, 0.9],
                    vec![0.1, 0.9],
                ],
            )
            .build()
            .unwrap();
        for x in 0..2 {
            let fd = scm.frontdoor_adjust(("X", x), "M", "Y").unwrap();
            let direct = scm.observational("Y", &[("M", x)]).unwrap();
            assert!(fd.max_abs_diff(&direct) < 1e-10);
        }
    }

    #[test]
    fn all_query_outputs_are_normalized() {
        let scm = ScmBuilder::new()
            .node("Z", 3, &[], vec![uniform_row(3)])
            .node(
                "X",
                2,
                &["Z"],
                vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]],
            )
            .node("M", 2, &["X"], vec![vec![0.7, 0.3], vec![0.4, 0.6]])
            .node(
                "Y",
                2,
                &["M", "Z"],
                vec![
                    vec![0.1, 0.9],
                    vec![0.3, 0.7],
                    vec![0.5, 0.5],
                    vec![0.6, 0.4],
                    vec![0.8, 0.2],
                    vec![0.25, 0.75],
                ],
            )
            .build()
            .unwrap();
        assert!(scm.observational("Y", &[("X", 0)]).unwrap().is_normalized());
        assert!(scm
            .surgery_intervene(&[("X", 0)], "Y")
            .unwrap()
            .is_normalized());
        assert!(scm
            .backdoor_adjust(("X", 0), "Y", &["Z"])
            .unwrap()
            .is_normalized());
        assert!(scm.frontdoor_adjust(("X", 0), "M", "Y").unwrap().is_normalized());
    }

    #[test]
    fn warm_frontdoor_reads_no_cpts_while_surgery_does() {
        let scm = ScmBuilder::new()
            .node("Z", 2, &[], vec![vec![0.3, 0.7]])
            .node("X", 2, &["Z"], vec![vec![0.6, 0.4], vec![0.2, 0.8]])
            .node("M", 2, &["X"], vec![vec![0.75, 0.25], vec![0.35, 0.65]])
            .node(
                "Y",
                2,
                &["M", "Z"],
                vec![
                    vec![0.55, 0.45],
                    vec![0.15, 0.85],
                    vec![0.7, 0.3],
                    vec![0.4, 0.6],
                ],
            )
            .build()
            .unwrap();
        scm.warm_joint();
        scm.reset_cpt_counters();
        let _ = scm.frontdoor_adjust(("X", 1), "M", "Y").unwrap();
        assert_eq!(scm.total_cpt_reads(), 0);
        let z = scm.node_id("Z").unwrap();
        assert_eq!(scm.cpt_reads(z), 0);
        let _ = scm.surgery_intervene(&[("X", 1)], "Y").unwrap();
        assert!(scm.cpt_reads(z) > 0, "surgery must read tables fresh");
    }
}
