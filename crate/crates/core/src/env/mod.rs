//! Deterministic environments with an avoid set.
//!
//! Two families live here: small [`FiniteMdp`]s that can be verified
//! exhaustively, and the discrete-torque inverted [`pendulum`].

pub mod pendulum;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use pendulum::{Pendulum, PendulumParams, PendulumState};

/// An environment with deterministic dynamics, a finite action set and a
/// binary insecurity signal marking the failure set.
pub trait DeterministicMdp {
    type State: Clone;

    fn num_actions(&self) -> usize;

    /// Successor `F(s, a)`. Total and deterministic.
    fn step(&self, state: &Self::State, action: usize) -> Self::State;

    /// `i(s)`: true exactly on the failure set.
    fn insecurity(&self, state: &Self::State) -> bool;
}

/// A deterministic MDP over states `0..n` and actions `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `n x m` successor table.
    successors: Vec<usize>,
    insecure: Vec<bool>,
}

impl FiniteMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        successors: Vec<usize>,
        insecure: Vec<bool>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if successors.len() != num_states * num_actions {
            return Err(Error::InvalidMdp(format!(
                "successor table has {} entries, expected {}",
                successors.len(),
                num_states * num_actions
            )));
        }
        if insecure.len() != num_states {
            return Err(Error::InvalidMdp(format!(
                "insecurity vector has {} entries, expected {num_states}",
                insecure.len()
            )));
        }
        if let Some(bad) = successors.iter().find(|&&s| s >= num_states) {
            return Err(Error::InvalidMdp(format!("successor index {bad} out of range")));
        }
        Ok(Self {
            num_states,
            num_actions,
            successors,
            insecure,
        })
    }

    /// Seeded random instance with uniform successors and each state insecure
    /// with probability `insecure_density`. All-insecure draws are rejected.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        num_states: usize,
        num_actions: usize,
        insecure_density: f64,
    ) -> Self {
        assert!(num_states > 0 && num_actions > 0);
        loop {
            let successors = (0..num_states * num_actions)
                .map(|_| rng.random_range(0..num_states))
                .collect();
            let insecure: Vec<bool> = (0..num_states)
                .map(|_| rng.random_bool(insecure_density))
                .collect();
            if insecure.iter().all(|&b| b) {
                continue;
            }
            return Self {
                num_states,
                num_actions,
                successors,
                insecure,
            };
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn successor(&self, state: usize, action: usize) -> usize {
        self.successors[state * self.num_actions + action]
    }

    #[inline]
    pub fn is_insecure(&self, state: usize) -> bool {
        self.insecure[state]
    }

    pub fn insecure_states(&self) -> &[bool] {
        &self.insecure
    }

    pub fn successors(&self) -> &[usize] {
        &self.successors
    }
}

impl DeterministicMdp for FiniteMdp {
    type State = usize;

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn step(&self, state: &usize, action: usize) -> usize {
        self.successor(*state, action)
    }

    fn insecurity(&self, state: &usize) -> bool {
        self.insecure[*state]
    }
}

/// Text format:
///
/// ```text
/// # comment lines start with '#'
/// 3 2          # n m
/// 0 1          # successors of state 0, one per action
/// 1 2
/// 2 2
/// 0 0 1        # insecurity bits
/// ```
impl FromStr for FiniteMdp {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|line| line.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let mut next_usize = |what: &str| -> Result<usize> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of input reading {what}")))?;
            tok.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad {what}: {tok:?}")))
        };
        let n = next_usize("state count")?;
        let m = next_usize("action count")?;
        let successors = (0..n * m)
            .map(|_| next_usize("successor"))
            .collect::<Result<Vec<_>>>()?;
        let insecure = (0..n)
            .map(|_| match next_usize("insecurity bit")? {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Parse(format!("insecurity bit must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.next().is_some() {
            return Err(Error::Parse("trailing tokens after insecurity vector".into()));
        }
        FiniteMdp::new(n, m, successors, insecure)
    }
}

impl fmt::Display for FiniteMdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.num_states, self.num_actions)?;
        for row in self.successors.chunks(self.num_actions) {
            let row: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        let bits: Vec<&str> = self
            .insecure
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect();
        writeln!(f, "{}", bits.join(" "))
    }
}

/// A stationary stochastic policy over a finite MDP: one probability row per
/// state. Only the support matters for reachability.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_actions == 0 || !probs.len().is_multiple_of(num_actions) {
            return Err(Error::InvalidPolicy("probability table shape mismatch".into()));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidPolicy(format!(
                    "row {s} is not a probability vector"
                )));
            }
        }
        Ok(Self { num_actions, probs })
    }

    /// Uniform over `allowed(s, a)`; falls back to uniform over all actions
    /// when nothing is allowed at a state.
    pub fn uniform_over(
        num_states: usize,
        num_actions: usize,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut probs = Vec::with_capacity(num_states * num_actions);
        for s in 0..num_states {
            let k = (0..num_actions).filter(|&a| allowed(s, a)).count();
            for a in 0..num_actions {
                probs.push(match k {
                    0 => 1.0 / num_actions as f64,
                    _ if allowed(s, a) => 1.0 / k as f64,
                    _ => 0.0,
                });
            }
        }
        Self { num_actions, probs }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self::uniform_over(num_states, num_actions, |_, _| true)
    }

    /// Deterministic policy from an action per state.
    pub fn deterministic(num_actions: usize, choice: &[usize]) -> Self {
        Self::uniform_over(choice.len(), num_actions, |s, a| choice[s] == a)
    }

    pub fn num_states(&self) -> usize {
        self.probs.len() / self.num_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn support(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_actions).filter(move |&a| self.prob(state, a) > 0.0)
    }
}

/// `t`-step reachable set from `start` under the support of `policy`.
pub fn reachable_set(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: usize,
    horizon: usize,
) -> BTreeSet<usize> {
    let mut frontier = BTreeSet::from([start]);
    for _ in 0..horizon {
        frontier = frontier
            .iter()
            .flat_map(|&s| policy.support(s).map(move |a| mdp.successor(s, a)))
            .collect();
    }
    frontier
}

/// `t`-step reachable set with the first action pinned to `action`.
/// For `horizon = 0` this is `{start}`.
pub fn reachable_set_sa(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: usize,
    action: usize,
    horizon: usize,
) -> BTreeSet<usize> {
    if horizon == 0 {
        return BTreeSet::from([start]);
    }
    reachable_set(mdp, policy, mdp.successor(start, action), horizon - 1)
}
