//! Exact binary critics on finite MDPs.
//!
//! The binary Bellman operator is monotone on the lattice of binary tables,
//! so iterating it from the all-zero table (Kleene iteration) climbs to its
//! least fixed point `b*` in at most `n * m` sweeps. [`grid`] lifts this to
//! the pendulum through a finite discretization.

pub mod grid;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::env::{FiniteMdp, TabularPolicy};

pub use grid::{
    grid_oracle_pendulum, params_hash, refinement_disagreement, sha256_hex, write_mask, GridMdp,
    GridSpec, PendulumOracle, SafeSetMask,
};

/// A binary table `b(s, a)` over a finite MDP; `true` means unsafe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TabularCritic {
    num_states: usize,
    num_actions: usize,
    bits: Vec<bool>,
}

impl TabularCritic {
    pub fn filled(num_states: usize, num_actions: usize, value: bool) -> Self {
        Self {
            num_states,
            num_actions,
            bits: vec![value; num_states * num_actions],
        }
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, false)
    }

    pub fn ones(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, true)
    }

    /// Row-major `n x m` bits.
    pub fn from_bits(num_states: usize, num_actions: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), num_states * num_actions);
        Self {
            num_states,
            num_actions,
            bits,
        }
    }

    /// Decodes the `index`-th candidate of the `2^(n m)` enumeration: bit `k`
    /// of `index` is entry `k` in row-major order.
    pub fn from_index(num_states: usize, num_actions: usize, index: u64) -> Self {
        let bits = (0..num_states * num_actions)
            .map(|k| (index >> k) & 1 == 1)
            .collect();
        Self::from_bits(num_states, num_actions, bits)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> bool {
        self.bits[state * self.num_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: bool) {
        self.bits[state * self.num_actions + action] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn row(&self, state: usize) -> &[bool] {
        &self.bits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    /// `min_a b(s, a)`: true iff every action at `state` is unsafe.
    #[inline]
    pub fn state_min(&self, state: usize) -> bool {
        self.row(state).iter().all(|&b| b)
    }

    pub fn state_values(&self) -> Vec<bool> {
        (0..self.num_states).map(|s| self.state_min(s)).collect()
    }

    /// Pointwise `self <= other`.
    pub fn le(&self, other: &Self) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn count_unsafe(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_shape(&self, mdp: &FiniteMdp) {
        assert_eq!(
            (self.num_states, self.num_actions),
            (mdp.num_states(), mdp.num_actions()),
            "critic shape does not match MDP"
        );
    }
}

/// `(T b)(s, a) = i(s) + (1 - i(s)) min_a' b(F(s, a), a')`.
pub fn apply_operator(b: &TabularCritic, mdp: &FiniteMdp) -> TabularCritic {
    b.check_shape(mdp);
    let next_min = b.state_values();
    apply_with_state_values(&next_min, mdp)
}

fn apply_with_state_values(next_min: &[bool], mdp: &FiniteMdp) -> TabularCritic {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    let mut bits = Vec::with_capacity(n * m);
    for s in 0..n {
        let insecure = mdp.is_insecure(s);
        for a in 0..m {
            bits.push(insecure || next_min[mdp.successor(s, a)]);
        }
    }
    TabularCritic::from_bits(n, m, bits)
}

pub fn is_fixed_point(b: &TabularCritic, mdp: &FiniteMdp) -> bool {
    apply_operator(b, mdp) == *b
}

/// Result of Kleene iteration from the all-zero table.
#[derive(Debug, Clone)]
pub struct KleeneRun {
    pub b_star: TabularCritic,
    /// Number of operator applications until `b_{k+1} = b_k` was observed.
    pub sweeps: usize,
}

/// Least fixed point `b*` of the operator.
pub fn optimal_b_star(mdp: &FiniteMdp) -> TabularCritic {
    kleene(mdp, |_| {}).b_star
}

/// Kleene iteration with a hook that sees every iterate `b_0, b_1, ...`.
pub fn kleene(mdp: &FiniteMdp, mut observe: impl FnMut(&TabularCritic)) -> KleeneRun {
    let cap = mdp.num_states() * mdp.num_actions() + 1;
    let mut current = TabularCritic::zeros(mdp.num_states(), mdp.num_actions());
    observe(&current);
    for sweep in 1..=cap {
        let next = apply_operator(&current, mdp);
        observe(&next);
        if next == current {
            return KleeneRun {
                b_star: next,
                sweeps: sweep,
            };
        }
        debug_assert!(current.le(&next), "Kleene iterates must be nondecreasing");
        current = next;
    }
    // Each non-final sweep flips at least one bit from 0 to 1.
    unreachable!("Kleene iteration exceeded n*m sweeps on a finite MDP");
}

/// `v*(s) = min_a b*(s, a)`.
pub fn optimal_v_star(mdp: &FiniteMdp) -> Vec<bool> {
    optimal_b_star(mdp).state_values()
}

/// Exact binary safety values of `policy`: `v(s)` (resp. `b(s, a)`) is true
/// iff a failure state is reachable with positive probability from `s`
/// (resp. from `s` after taking `a`).
pub fn policy_value(mdp: &FiniteMdp, policy: &TabularPolicy) -> (Vec<bool>, TabularCritic) {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    assert_eq!(policy.num_states(), n, "policy shape does not match MDP");
    let reaches_failure = |roots: &[usize]| -> bool {
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &r in roots {
            if !seen[r] {
                seen[r] = true;
                queue.push_back(r);
            }
        }
        while let Some(s) = queue.pop_front() {
            if mdp.is_insecure(s) {
                return true;
            }
            for a in policy.support(s) {
                let next = mdp.successor(s, a);
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
        false
    };
    let v: Vec<bool> = (0..n).map(|s| reaches_failure(&[s])).collect();
    let mut bits = Vec::with_capacity(n * m);
    for s in 0..n {
        for a in 0..m {
            // t = 0 contributes i(s); t >= 1 explores from the pinned successor.
            bits.push(mdp.is_insecure(s) || reaches_failure(&[mdp.successor(s, a)]));
        }
    }
    (v, TabularCritic::from_bits(n, m, bits))
}
