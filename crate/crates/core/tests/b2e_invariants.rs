use proptest::prelude::*;

use safecritic::b2e::{
    consistency_report, train_b2e, uniform_safe_policy, InitialStates, TrainConfig,
};
use safecritic::env::{Pendulum, PendulumParams, PendulumState};

proptest! {
    #[test]
    fn policy_support_is_the_safe_actions(values in proptest::collection::vec(0.0f64..1.0, 1..8)) {
        let p = uniform_safe_policy(&values);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let any_safe = values.iter().any(|&v| v < 0.5);
        let least = values.iter().copied().fold(f64::INFINITY, f64::min);
        for (&v, &q) in values.iter().zip(&p) {
            if any_safe {
                prop_assert_eq!(q > 0.0, v < 0.5);
            } else {
                prop_assert_eq!(q > 0.0, v == least);
            }
        }
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        total_episodes: 30,
        max_steps: 60,
        hidden: vec![16, 16],
        max_epochs: 1500,
        max_passes: 10,
        lr_start: 1e-2,
        lr_end: 3e-3,
        ..TrainConfig::default()
    }
}

fn starts() -> InitialStates {
    let states = (-2..=2)
        .flat_map(|i| (-2..=2).map(move |j| PendulumState::new(0.2 * i as f64, 0.2 * j as f64)))
        .collect();
    InitialStates::new(states).unwrap()
}

#[test]
fn consistent_rounds_never_miss_an_unsafe_target() {
    let env = Pendulum::new(PendulumParams::default()).unwrap();
    let config = small_config();
    let mut checked = 0;
    let run = train_b2e(&env, &config, &starts(), 3, |log, critic, buffer| {
        let report = consistency_report(critic, buffer, &config.axioms(5), &config);
        assert_eq!(report.consistent(), log.consistent, "round {}", log.round);
        if log.consistent {
            assert_eq!(report.unsafe_missed, 0, "round {}", log.round);
            assert_eq!(report.accuracy, 1.0);
            checked += 1;
        }
        Ok(())
    })
    .unwrap();
    assert!(checked > 0);
    assert_eq!(run.episodes.len(), 30);
    assert_eq!(*run.cumulative_failures().last().unwrap(), run.rounds.last().unwrap().cumulative_failures);
    // axioms keep their safe label
    for ax in &run.axioms {
        assert!(run.critic.values(&ax.state)[ax.action] < 0.5);
    }
}

#[test]
fn same_seed_same_run() {
    let env = Pendulum::new(PendulumParams::default()).unwrap();
    let mut config = small_config();
    config.total_episodes = 20;
    let a = train_b2e(&env, &config, &starts(), 9, |_, _, _| Ok(())).unwrap();
    let b = train_b2e(&env, &config, &starts(), 9, |_, _, _| Ok(())).unwrap();
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(a.critic.values(&PendulumState::new(0.3, -0.2)), b.critic.values(&PendulumState::new(0.3, -0.2)));
}
