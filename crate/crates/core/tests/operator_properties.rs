mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::doomed::{doomed_critic, doomed_states};
use safecritic::atlas::{self, enumerate_fixed_points};
use safecritic::env::{reachable_set, reachable_set_sa, FiniteMdp, TabularPolicy};
use safecritic::oracle::{
    apply_operator, is_fixed_point, kleene, optimal_b_star, optimal_v_star, policy_value, TabularCritic,
};

fn mdp_strategy(max_states: usize, max_actions: usize) -> impl Strategy<Value = FiniteMdp> {
    (1..=max_states, 1..=max_actions).prop_flat_map(|(n, m)| {
        (
            proptest::collection::vec(0..n, n * m),
            proptest::collection::vec(proptest::bool::weighted(0.25), n),
        )
            .prop_map(move |(succ, insecure)| FiniteMdp::new(n, m, succ, insecure).unwrap())
    })
}

fn critic_for(mdp: &FiniteMdp) -> impl Strategy<Value = TabularCritic> {
    let (n, m) = (mdp.num_states(), mdp.num_actions());
    proptest::collection::vec(any::<bool>(), n * m).prop_map(move |bits| TabularCritic::from_bits(n, m, bits))
}

fn mdp_with_two_critics() -> impl Strategy<Value = (FiniteMdp, TabularCritic, TabularCritic)> {
    mdp_strategy(8, 3).prop_flat_map(|mdp| {
        let pair = (critic_for(&mdp), critic_for(&mdp));
        (Just(mdp), pair).prop_map(|(mdp, (a, b))| (mdp, a, b))
    })
}

fn mdp_with_policy() -> impl Strategy<Value = (FiniteMdp, TabularPolicy, usize, usize)> {
    mdp_strategy(8, 3).prop_flat_map(|mdp| {
        let (n, m) = (mdp.num_states(), mdp.num_actions());
        (
            Just(mdp),
            proptest::collection::vec(any::<bool>(), n * m),
            0..n,
            1usize..10,
        )
            .prop_map(move |(mdp, allowed, s, t)| {
                let policy = TabularPolicy::uniform_over(n, m, |s, a| allowed[s * m + a]);
                (mdp, policy, s, t)
            })
    })
}

fn meet(a: &TabularCritic, b: &TabularCritic) -> TabularCritic {
    let bits = a.bits().iter().zip(b.bits()).map(|(x, y)| *x && *y).collect();
    TabularCritic::from_bits(a.num_states(), a.num_actions(), bits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn operator_is_monotone((mdp, a, b) in mdp_with_two_critics()) {
        // a ∧ b ≤ a gives an ordered pair from any two draws
        let low = meet(&a, &b);
        prop_assert!(low.le(&a));
        prop_assert!(apply_operator(&low, &mdp).le(&apply_operator(&a, &mdp)));
    }

    #[test]
    fn all_ones_is_a_fixed_point(mdp in mdp_strategy(8, 3)) {
        let ones = TabularCritic::ones(mdp.num_states(), mdp.num_actions());
        prop_assert_eq!(apply_operator(&ones, &mdp), ones.clone());
        // spurious whenever some state can be kept safe
        let b_star = optimal_b_star(&mdp);
        if b_star.state_values().contains(&false) {
            prop_assert_ne!(b_star, ones);
        }
    }

    #[test]
    fn b_star_matches_doomed_set_oracle(mdp in mdp_strategy(8, 3)) {
        let b_star = optimal_b_star(&mdp);
        prop_assert!(is_fixed_point(&b_star, &mdp));
        let expected = doomed_critic(&mdp);
        prop_assert_eq!(b_star.bits(), expected.as_slice());
        let v_star = optimal_v_star(&mdp);
        prop_assert_eq!(&v_star, &b_star.state_values());
        let doomed = doomed_states(&mdp);
        prop_assert_eq!(v_star, doomed);
    }

    #[test]
    fn kleene_is_monotone_and_bounded(mdp in mdp_strategy(8, 3)) {
        let mut iterates = Vec::new();
        let run = kleene(&mdp, |b| iterates.push(b.clone()));
        prop_assert!(run.sweeps <= mdp.num_states() * mdp.num_actions() + 1);
        for w in iterates.windows(2) {
            prop_assert!(w[0].le(&w[1]));
        }
    }

    #[test]
    fn b_star_is_least_among_enumerated_fixed_points(mdp in mdp_strategy(4, 3)) {
        let fixed = enumerate_fixed_points(&mdp).unwrap();
        let b_star = optimal_b_star(&mdp);
        prop_assert!(fixed.contains(&b_star));
        for b in &fixed {
            prop_assert!(b_star.le(b));
        }
    }

    #[test]
    fn reachable_set_step_identity((mdp, policy, s, t) in mdp_with_policy()) {
        let whole = reachable_set(&mdp, &policy, s, t);
        let split: BTreeSet<usize> = reachable_set(&mdp, &policy, s, 1)
            .into_iter()
            .flat_map(|s1| reachable_set(&mdp, &policy, s1, t - 1))
            .collect();
        prop_assert_eq!(&whole, &split);
        let pinned: BTreeSet<usize> = policy
            .support(s)
            .flat_map(|a| reachable_set_sa(&mdp, &policy, s, a, t))
            .collect();
        prop_assert_eq!(whole, pinned);
    }

    #[test]
    fn safest_policy_keeps_every_safe_state_safe(mdp in mdp_strategy(8, 3)) {
        let b_star = optimal_b_star(&mdp);
        let (n, m) = (mdp.num_states(), mdp.num_actions());
        let policy = TabularPolicy::uniform_over(n, m, |s, a| !b_star.get(s, a));
        let (v, _) = policy_value(&mdp, &policy);
        prop_assert_eq!(v, b_star.state_values());
    }

    #[test]
    fn non_spurious_fixed_points_are_certified(mdp in mdp_strategy(4, 3)) {
        let report = atlas::certify_instance(0, &mdp);
        prop_assert!(report.passed(), "{:?}", report);
    }
}
