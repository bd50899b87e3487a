//! Exhaustive fixed-point atlas for small finite MDPs.
//!
//! Every binary table is tried against the operator, and each fixed point is
//! certified: its zero set `C` must be control invariant and safe under the
//! safest-support policy, unreachable from outside, and no strict subset of
//! `C` reachable from the rest of `C` may be the zero set of another fixed
//! point. The all-ones table is the one fixed point exempt from these checks.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::FiniteMdp;
use crate::oracle::{is_fixed_point, optimal_b_star, SafeSetMask, TabularCritic};
use crate::rng;
use crate::{Error, Result};

/// Largest `n * m` for which all `2^(n m)` tables are enumerated.
pub const ENUMERATION_BUDGET: usize = 20;

/// A transition that breaks a certified property: taking `action` at `state`
/// after `step` steps from `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub origin: usize,
    pub state: usize,
    pub action: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub ok: bool,
    pub witness: Option<Witness>,
}

impl Verification {
    fn pass() -> Self {
        Self {
            ok: true,
            witness: None,
        }
    }

    fn fail(witness: Witness) -> Self {
        Self {
            ok: false,
            witness: Some(witness),
        }
    }
}

fn check_budget(mdp: &FiniteMdp) -> Result<()> {
    let required = mdp.num_states() * mdp.num_actions();
    if required > ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded {
            required,
            budget: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// All fixed points of the operator, in lexicographic order of their
/// row-major bit vectors.
pub fn enumerate_fixed_points(mdp: &FiniteMdp) -> Result<Vec<TabularCritic>> {
    check_budget(mdp)?;
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut out: Vec<TabularCritic> = (0..1u64 << (n * m))
        .map(|index| TabularCritic::from_index(n, m, index))
        .filter(|b| is_fixed_point(b, mdp))
        .collect();
    out.sort();
    Ok(out)
}

/// `C = { s : min_a b(s, a) = 0 }`.
pub fn cis_set_of(b: &TabularCritic) -> SafeSetMask {
    SafeSetMask::from_critic(b)
}

/// Simulates every branch of the safest-support policy (actions with
/// `b(s, a) = 0`) from each state of `C` for `n` steps and checks that no
/// branch leaves `C` or touches the failure set.
pub fn verify_cis(mdp: &FiniteMdp, b: &TabularCritic, cis: &SafeSetMask) -> Verification {
    verify_invariance(mdp, cis, |s, a| !b.get(s, a))
}

/// Same as [`verify_cis`] for an arbitrary support rule.
pub fn verify_invariance(
    mdp: &FiniteMdp,
    cis: &SafeSetMask,
    support: impl Fn(usize, usize) -> bool,
) -> Verification {
    let n = mdp.num_states();
    for origin in cis.members() {
        if mdp.is_insecure(origin) {
            return Verification::fail(Witness {
                origin,
                state: origin,
                action: 0,
                step: 0,
            });
        }
        let mut layer = BTreeSet::from([origin]);
        for step in 0..n {
            let mut next_layer = BTreeSet::new();
            for &s in &layer {
                for a in (0..mdp.num_actions()).filter(|&a| support(s, a)) {
                    let next = mdp.successor(s, a);
                    if !cis.contains(next) || mdp.is_insecure(next) {
                        return Verification::fail(Witness {
                            origin,
                            state: s,
                            action: a,
                            step,
                        });
                    }
                    next_layer.insert(next);
                }
            }
            if next_layer == layer {
                break;
            }
            layer = next_layer;
        }
    }
    Verification::pass()
}

/// Checks that no action sequence of length up to `n` from a secure state
/// outside `C` enters `C`. Trajectories end at the first insecure state, so
/// insecure states are neither origins nor expanded.
pub fn verify_unreachable(mdp: &FiniteMdp, cis: &SafeSetMask) -> Verification {
    let n = mdp.num_states();
    for origin in (0..n).filter(|&s| !cis.contains(s) && !mdp.is_insecure(s)) {
        let mut seen = vec![false; n];
        seen[origin] = true;
        let mut layer = vec![origin];
        for step in 0..n {
            let mut next_layer = Vec::new();
            for &s in &layer {
                for a in 0..mdp.num_actions() {
                    let next = mdp.successor(s, a);
                    if cis.contains(next) {
                        return Verification::fail(Witness {
                            origin,
                            state: s,
                            action: a,
                            step,
                        });
                    }
                    if !seen[next] && !mdp.is_insecure(next) {
                        seen[next] = true;
                        next_layer.push(next);
                    }
                }
            }
            if next_layer.is_empty() {
                break;
            }
            layer = next_layer;
        }
    }
    Verification::pass()
}

/// States reachable (in zero or more steps, any actions) from `roots`,
/// without expanding insecure states.
fn forward_closure(mdp: &FiniteMdp, roots: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; mdp.num_states()];
    let mut stack: Vec<usize> = Vec::new();
    for r in roots {
        if !seen[r] {
            seen[r] = true;
            stack.push(r);
        }
    }
    while let Some(s) = stack.pop() {
        if mdp.is_insecure(s) {
            continue;
        }
        for a in 0..mdp.num_actions() {
            let next = mdp.successor(s, a);
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen
}

/// A strict subset `X` of a certified `C`, reachable from `C \ X`, that is
/// nevertheless the zero set of some fixed point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaximalityViolation {
    pub cis: Vec<usize>,
    pub subset: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaximalityReport {
    pub ok: bool,
    /// Number of `(C, X)` pairs where `X` was reachable from `C \ X`.
    pub reachable_subsets_checked: usize,
    pub violation: Option<MaximalityViolation>,
}

/// For every fixed point with zero set `C` and every strict subset `X` of
/// `C` reachable from `C \ X`, confirms that `X` is not the zero set of any
/// listed fixed point.
pub fn verify_maximality(mdp: &FiniteMdp, fixed_points: &[TabularCritic]) -> Result<MaximalityReport> {
    check_budget(mdp)?;
    let zero_sets: BTreeSet<Vec<bool>> = fixed_points
        .iter()
        .map(|b| cis_set_of(b).states().to_vec())
        .collect();
    let mut checked = 0;
    for b in fixed_points {
        let cis = cis_set_of(b);
        let members: Vec<usize> = cis.members().collect();
        let k = members.len();
        // every strict, nonempty subset of C
        for mask in 1..(1u64 << k).saturating_sub(1) {
            let mut subset = vec![false; mdp.num_states()];
            for (j, &s) in members.iter().enumerate() {
                subset[s] = (mask >> j) & 1 == 1;
            }
            let rest = members.iter().copied().filter(|&s| !subset[s]);
            let reach = forward_closure(mdp, rest);
            let reachable = reach.iter().zip(&subset).any(|(&r, &x)| r && x);
            if !reachable {
                continue;
            }
            checked += 1;
            if zero_sets.contains(&subset) {
                return Ok(MaximalityReport {
                    ok: false,
                    reachable_subsets_checked: checked,
                    violation: Some(MaximalityViolation {
                        cis: members,
                        subset: (0..subset.len()).filter(|&s| subset[s]).collect(),
                    }),
                });
            }
        }
    }
    Ok(MaximalityReport {
        ok: true,
        reachable_subsets_checked: checked,
        violation: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub critic: Vec<bool>,
    pub is_spurious: bool,
    pub cis: Vec<usize>,
    pub cis_verified: bool,
    pub unreachable_verified: bool,
    pub policy_renders_cis: bool,
    pub counterexample: Option<Witness>,
}

impl FixedPointReport {
    /// Consistent with the fixed-point characterization.
    pub fn accepted(&self) -> bool {
        self.counterexample.is_none()
            && (self.is_spurious
                || (self.cis_verified && self.unreachable_verified && self.policy_renders_cis))
    }
}

pub fn certify_fixed_point(mdp: &FiniteMdp, b: &TabularCritic) -> FixedPointReport {
    certify_fixed_point_with(mdp, b, cis_set_of(b))
}

/// Certifies `b` against a caller-supplied candidate set instead of its zero
/// set; used to exercise the failure path.
pub fn certify_fixed_point_with(
    mdp: &FiniteMdp,
    b: &TabularCritic,
    cis: SafeSetMask,
) -> FixedPointReport {
    let members = cis.members().collect();
    if b.is_all_ones() {
        return FixedPointReport {
            critic: b.bits().to_vec(),
            is_spurious: true,
            cis: members,
            cis_verified: true,
            unreachable_verified: true,
            policy_renders_cis: true,
            counterexample: None,
        };
    }
    let invariance = verify_cis(mdp, b, &cis);
    let unreachable = verify_unreachable(mdp, &cis);
    // The uniform policy over {a : b(s, a) = 0} has the largest support
    // allowed; any admissible policy reaches a subset of its states.
    let policy = verify_invariance(mdp, &cis, |s, a| !cis.contains(s) || !b.get(s, a));
    FixedPointReport {
        critic: b.bits().to_vec(),
        is_spurious: false,
        cis: members,
        cis_verified: invariance.ok,
        unreachable_verified: unreachable.ok,
        policy_renders_cis: policy.ok,
        counterexample: invariance
            .witness
            .or(unreachable.witness)
            .or(policy.witness),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub mdp: String,
    pub skipped: Option<String>,
    pub fixed_points: Vec<FixedPointReport>,
    pub b_star_listed: bool,
    pub b_star_minimal: bool,
    pub maximality: Option<MaximalityReport>,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.skipped.is_some()
            || (self.fixed_points.iter().all(FixedPointReport::accepted)
                && self.b_star_listed
                && self.b_star_minimal
                && self.maximality.as_ref().is_some_and(|m| m.ok))
    }
}

/// Enumerates and certifies every fixed point of `mdp`. Instances over the
/// enumeration budget are reported as skipped.
pub fn certify_instance(index: usize, mdp: &FiniteMdp) -> InstanceReport {
    certify_instance_with(index, mdp, cis_set_of)
}

/// [`certify_instance`] with the candidate set of each fixed point computed
/// by `cis_of`.
pub fn certify_instance_with(
    index: usize,
    mdp: &FiniteMdp,
    cis_of: impl Fn(&TabularCritic) -> SafeSetMask,
) -> InstanceReport {
    let mut report = InstanceReport {
        index,
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        mdp: mdp.to_string(),
        skipped: None,
        fixed_points: Vec::new(),
        b_star_listed: false,
        b_star_minimal: false,
        maximality: None,
    };
    let fixed_points = match enumerate_fixed_points(mdp) {
        Ok(list) => list,
        Err(e) => {
            report.skipped = Some(e.to_string());
            return report;
        }
    };
    let b_star = optimal_b_star(mdp);
    report.b_star_listed = fixed_points.contains(&b_star);
    report.b_star_minimal = fixed_points.iter().all(|b| b_star.le(b));
    report.fixed_points = fixed_points
        .iter()
        .map(|b| certify_fixed_point_with(mdp, b, cis_of(b)))
        .collect();
    report.maximality = verify_maximality(mdp, &fixed_points).ok();
    report
}

/// Seeded random instances with `1..=max_states` states, `1..=max_actions`
/// actions and insecurity density `density`.
pub fn random_instances(
    seed: u64,
    count: usize,
    max_states: usize,
    max_actions: usize,
    density: f64,
) -> Vec<FiniteMdp> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| {
            let n = r.random_range(1..=max_states);
            let m = r.random_range(1..=max_actions);
            FiniteMdp::random(&mut r, n, m, density)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> FiniteMdp {
        FiniteMdp::new(3, 2, vec![0, 1, 1, 2, 2, 2], vec![false, false, true]).unwrap()
    }

    #[test]
    fn single_safe_self_loop_has_two_fixed_points() {
        let mdp = FiniteMdp::new(1, 1, vec![0], vec![false]).unwrap();
        let fps = enumerate_fixed_points(&mdp).unwrap();
        assert_eq!(fps, vec![TabularCritic::zeros(1, 1), TabularCritic::ones(1, 1)]);
    }

    #[test]
    fn chain_fixed_points() {
        let mdp = chain();
        let fps = enumerate_fixed_points(&mdp).unwrap();
        assert!(fps.contains(&optimal_b_star(&mdp)));
        assert!(fps.contains(&TabularCritic::ones(3, 2)));
        // Exhaustive cross-check against direct operator application.
        let brute: Vec<TabularCritic> = (0..64)
            .map(|i| TabularCritic::from_index(3, 2, i))
            .filter(|b| crate::oracle::apply_operator(b, &mdp) == *b)
            .collect();
        assert_eq!(fps.len(), brute.len());
        let mut sorted = fps.clone();
        sorted.sort();
        assert_eq!(sorted, fps);
    }

    #[test]
    fn budget_is_enforced() {
        let mdp = FiniteMdp::new(7, 3, vec![0; 21], vec![false; 7]).unwrap();
        assert!(matches!(
            enumerate_fixed_points(&mdp),
            Err(Error::BudgetExceeded { required: 21, budget: 20 })
        ));
        let report = certify_instance(0, &mdp);
        assert!(report.skipped.is_some() && report.passed());
    }

    #[test]
    fn cis_set_examples() {
        let mdp = chain();
        assert!(cis_set_of(&TabularCritic::ones(3, 2)).is_empty());
        let c = cis_set_of(&optimal_b_star(&mdp));
        assert_eq!(c.members().collect::<Vec<_>>(), vec![0, 1]);
        for s in 0..3 {
            if mdp.is_insecure(s) {
                assert!(!c.contains(s));
            }
        }
    }

    #[test]
    fn chain_b_star_is_certified() {
        let mdp = chain();
        let b = optimal_b_star(&mdp);
        let c = cis_set_of(&b);
        assert!(verify_cis(&mdp, &b, &c).ok);
        assert!(verify_unreachable(&mdp, &c).ok);
        assert!(certify_fixed_point(&mdp, &b).accepted());
    }

    #[test]
    fn empty_cis_is_vacuous() {
        let mdp = chain();
        let ones = TabularCritic::ones(3, 2);
        let c = cis_set_of(&ones);
        assert!(verify_cis(&mdp, &ones, &c).ok);
        assert!(verify_unreachable(&mdp, &c).ok);
        assert!(certify_fixed_point(&mdp, &ones).is_spurious);
    }

    #[test]
    fn corrupted_critic_yields_witness() {
        // State 1 labelled safe only through `right`, which enters the failure state.
        let mdp = chain();
        let corrupted =
            TabularCritic::from_bits(3, 2, vec![false, false, true, false, true, true]);
        assert!(!is_fixed_point(&corrupted, &mdp));
        let c = cis_set_of(&corrupted);
        let v = verify_cis(&mdp, &corrupted, &c);
        assert!(!v.ok);
        let w = v.witness.unwrap();
        assert_eq!((w.state, w.action), (1, 1));
    }

    #[test]
    fn unreachable_witness_for_back_edge() {
        // 2 -> 0 back edge: a set {0, 1} is reachable from 2
        let mdp = FiniteMdp::new(3, 1, vec![1, 0, 0], vec![false, false, false]).unwrap();
        let c = SafeSetMask::from_states(vec![true, true, false], 1);
        let v = verify_unreachable(&mdp, &c);
        assert_eq!(v.witness.map(|w| (w.origin, w.state)), Some((2, 2)));
    }

    #[test]
    fn failure_states_may_enter_cis() {
        // 1 is insecure and falls back into the safe self-loop at 0
        let mdp = FiniteMdp::new(2, 1, vec![0, 0], vec![false, true]).unwrap();
        let b = optimal_b_star(&mdp);
        assert!(certify_fixed_point(&mdp, &b).accepted());
        // 2 -> 1 -> 0: the path through the failure state ends there
        let mdp = FiniteMdp::new(3, 1, vec![0, 0, 1], vec![false, true, false]).unwrap();
        let c = cis_set_of(&optimal_b_star(&mdp));
        assert!(verify_unreachable(&mdp, &c).ok);
    }

    #[test]
    fn maximality_with_back_edge() {
        // 0 <-> 1 cycle, both safe: {0} is reachable from {1} so it can
        // never be the zero set of a fixed point.
        let mdp = FiniteMdp::new(2, 1, vec![1, 0], vec![false, false]).unwrap();
        let fps = enumerate_fixed_points(&mdp).unwrap();
        let report = verify_maximality(&mdp, &fps).unwrap();
        assert!(report.ok);
        assert!(report.reachable_subsets_checked >= 2);
        // a forged list containing the zero set {0} is caught
        let forged = TabularCritic::from_bits(2, 1, vec![false, true]);
        let mut list = fps.clone();
        list.push(forged);
        assert!(!verify_maximality(&mdp, &list).unwrap().ok);
    }

    #[test]
    fn random_instances_certify() {
        for (i, mdp) in random_instances(42, 30, 5, 3, 0.2).iter().enumerate() {
            let report = certify_instance(i, mdp);
            assert!(report.passed(), "instance {i}: {report:?}");
        }
    }
}
