//! Discounted safety-critic baseline.
//!
//! `q(s, a)` regresses toward `(1 - gamma) h(s) + gamma min{h(s), max_a' q(s', a')}`
//! with `h` the signed distance to the failure set. Data comes from an
//! epsilon-greedy policy over `q`, targets from a frozen copy of the network
//! that is synced every few episodes, and the greedy action at `s'` is picked
//! by the online network (double-Q).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::b2e::{layer_sizes, observations, EpisodeSummary, InitialStates, ReplayBuffer, TransitionRecord};
use crate::env::{Pendulum, PendulumState};
use crate::neural::{self, Adam, Mlp, OutputActivation};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// One backup of the discounted safety equation.
pub fn sbe_target(h: f64, q_next_max: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * h + gamma * h.min(q_next_max)
}

/// Exploration rate `max{0.95 * 0.6^p, 0.05}` at training progress `p`.
pub fn epsilon(progress: f64) -> f64 {
    (0.95 * 0.6f64.powf(progress.clamp(0.0, 1.0))).max(0.05)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbeConfig {
    pub total_episodes: usize,
    pub max_steps: usize,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Episodes between hard copies of the online network into the target.
    pub target_sync_episodes: usize,
    /// Environment steps per gradient step.
    pub train_every: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for SbeConfig {
    fn default() -> Self {
        Self {
            total_episodes: 500,
            max_steps: 200,
            gamma: 0.9999,
            hidden: vec![256, 256],
            buffer_capacity: 50_000,
            batch_size: 64,
            target_sync_episodes: 10,
            train_every: 1,
            lr_start: neural::LR_START,
            lr_end: neural::LR_END,
        }
    }
}

impl SbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_episodes", self.total_episodes),
            ("max_steps", self.max_steps),
            ("buffer_capacity", self.buffer_capacity),
            ("batch_size", self.batch_size),
            ("target_sync_episodes", self.target_sync_episodes),
            ("train_every", self.train_every),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("sbe.{name} must be positive")));
            }
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("sbe.lr_start and sbe.lr_end must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("sbe.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("sbe.hidden must list positive widths".into()));
        }
        Ok(())
    }
}

/// Linear-output network estimating `q(s, a)`; larger is safer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbeCritic {
    pub net: Mlp,
}

impl SbeCritic {
    pub fn new(hidden: &[usize], num_actions: usize, rng: &mut SeededRng) -> Self {
        Self {
            net: Mlp::init(&layer_sizes(hidden, num_actions), OutputActivation::Identity, rng),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn values(&self, state: &PendulumState) -> Vec<f64> {
        self.net
            .forward(&state.observation())
            .expect("observation dimension fixed by construction")
    }

    pub fn values_batch(&self, states: &[PendulumState]) -> Vec<f64> {
        let mut out = Vec::with_capacity(states.len() * self.num_actions());
        for chunk in states.chunks(2048) {
            out.extend(
                self.net
                    .forward_batch(&observations(chunk))
                    .expect("observation dimension fixed by construction"),
            );
        }
        out
    }
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = a;
        }
    }
    best
}

/// Uniform over `{a : q(s, a) >= eta}`; all mass on the first maximizer when
/// that set is empty.
pub fn threshold_policy(q_values: &[f64], eta: f64) -> Vec<f64> {
    let safe = q_values.iter().filter(|&&q| q >= eta).count();
    if safe == 0 {
        let mut probs = vec![0.0; q_values.len()];
        probs[argmax(q_values)] = 1.0;
        return probs;
    }
    let p = 1.0 / safe as f64;
    q_values.iter().map(|&q| if q >= eta { p } else { 0.0 }).collect()
}

/// Per-episode training log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbeEpisodeLog {
    pub episode: usize,
    pub length: usize,
    pub failed: bool,
    pub cumulative_failures: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Mean squared TD error over the episode's gradient steps (0 if none).
    pub mean_loss: f64,
    pub gradient_steps: usize,
}

#[derive(Debug, Clone)]
pub struct SbeRun {
    pub critic: SbeCritic,
    pub episodes: Vec<EpisodeSummary>,
    pub log: Vec<SbeEpisodeLog>,
}

impl SbeRun {
    pub fn cumulative_failures(&self) -> Vec<usize> {
        self.log.iter().map(|l| l.cumulative_failures).collect()
    }
}

struct Learner {
    online: SbeCritic,
    target: SbeCritic,
    adam: Adam,
    gamma: f64,
}

impl Learner {
    /// Double-Q bootstrap targets for a minibatch of transitions.
    fn targets(&self, env: &Pendulum, batch: &[&TransitionRecord]) -> Vec<f64> {
        let nexts: Vec<PendulumState> = batch.iter().map(|t| t.next).collect();
        let m = self.online.num_actions();
        let online = self.online.values_batch(&nexts);
        let frozen = self.target.values_batch(&nexts);
        batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let h = env.signed_distance(&t.state);
                if t.insecure {
                    return h;
                }
                let row = &online[i * m..(i + 1) * m];
                let q_next = if env.is_failure(&t.next) {
                    env.signed_distance(&t.next)
                } else {
                    frozen[i * m + argmax(row)]
                };
                sbe_target(h, q_next, self.gamma)
            })
            .collect()
    }

    /// One gradient step on `0.5 * mean (q(s, a) - y)^2`. Returns the mean
    /// squared error before the step.
    fn step(&mut self, env: &Pendulum, batch: &[&TransitionRecord], lr: f64) -> Result<f64> {
        let targets = self.targets(env, batch);
        let states: Vec<PendulumState> = batch.iter().map(|t| t.state).collect();
        let cache = self.online.net.forward_cached(&observations(&states))?;
        let m = self.online.num_actions();
        let q = cache.logits.as_slice().expect("standard layout");
        let scale = 1.0 / batch.len() as f64;
        let mut mse = 0.0;
        let mut dlogits = Vec::with_capacity(batch.len());
        let mut actions = Vec::with_capacity(batch.len());
        for (i, (t, y)) in batch.iter().zip(&targets).enumerate() {
            let err = q[i * m + t.action] - y;
            mse += err * err * scale;
            dlogits.push(err * scale);
            actions.push(t.action);
        }
        if !mse.is_finite() {
            return Err(Error::NotConverged(format!(
                "sbe loss diverged (mse {mse}) after {} updates",
                self.adam.step
            )));
        }
        let grad = self.online.net.backward_selected(&cache, &actions, &dlogits);
        self.adam.update(self.online.net.params_mut(), &grad, lr);
        Ok(mse)
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_EPISODES: u64 = 2;
const STREAM_REPLAY: u64 = 3;

/// Full training run. `on_episode` sees every log row and the online critic.
pub fn train_sbe(
    env: &Pendulum,
    config: &SbeConfig,
    initial: &InitialStates,
    seed: u64,
    mut on_episode: impl FnMut(&SbeEpisodeLog, &SbeCritic) -> Result<()>,
) -> Result<SbeRun> {
    config.validate()?;
    let m = env.params.torque_levels;
    let online = SbeCritic::new(&config.hidden, m, &mut rng::stream(seed, STREAM_INIT));
    let mut learner = Learner {
        target: online.clone(),
        adam: Adam::new(online.net.num_params()),
        online,
        gamma: config.gamma,
    };
    let mut episode_rng = rng::stream(seed, STREAM_EPISODES);
    let mut replay_rng = rng::stream(seed, STREAM_REPLAY);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut episodes = Vec::with_capacity(config.total_episodes);
    let mut log = Vec::with_capacity(config.total_episodes);
    let mut failures = 0;
    let mut env_steps = 0usize;

    for episode in 0..config.total_episodes {
        let progress = episode as f64 / config.total_episodes as f64;
        let eps = epsilon(progress);
        let lr = neural::interpolate_lr(progress, config.lr_start, config.lr_end);
        let mut state = initial.sample(&mut episode_rng);
        let mut summary = EpisodeSummary {
            length: config.max_steps,
            failed: false,
        };
        let mut loss_sum = 0.0;
        let mut updates = 0;
        for step in 1..=config.max_steps {
            let action = if episode_rng.random::<f64>() < eps {
                episode_rng.random_range(0..m)
            } else {
                argmax(&learner.online.values(&state))
            };
            let next = env.pendulum_step(state, action);
            let insecure = env.is_failure(&state);
            buffer.push(TransitionRecord {
                state,
                action,
                insecure,
                next,
            });
            env_steps += 1;
            if buffer.len() >= config.batch_size && env_steps.is_multiple_of(config.train_every) {
                let batch: Vec<&TransitionRecord> = (0..config.batch_size)
                    .map(|_| {
                        let i = replay_rng.random_range(0..buffer.len());
                        buffer.get(i).expect("index in range")
                    })
                    .collect();
                loss_sum += learner.step(env, &batch, lr)?;
                updates += 1;
            }
            if insecure {
                summary = EpisodeSummary {
                    length: step,
                    failed: true,
                };
                break;
            }
            state = next;
        }
        failures += usize::from(summary.failed);
        episodes.push(summary);
        if (episode + 1) % config.target_sync_episodes == 0 {
            learner.target = learner.online.clone();
        }
        let row = SbeEpisodeLog {
            episode,
            length: summary.length,
            failed: summary.failed,
            cumulative_failures: failures,
            epsilon: eps,
            learning_rate: lr,
            mean_loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
            gradient_steps: updates,
        };
        on_episode(&row, &learner.online)?;
        log.push(row);
    }
    Ok(SbeRun {
        critic: learner.online,
        episodes,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PendulumParams;

    #[test]
    fn target_examples() {
        assert!((sbe_target(0.5, 0.3, 0.9999) - 0.30002).abs() < 1e-12);
        // min picks h when h <= q_next_max
        assert!((sbe_target(0.2, 0.9, 0.9999) - 0.2).abs() < 1e-15);
        assert_eq!(sbe_target(-0.4, -0.4, 0.9999), -0.4);
    }

    #[test]
    fn epsilon_schedule() {
        assert!((epsilon(0.0) - 0.95).abs() < 1e-15);
        assert!((epsilon(1.0) - 0.57).abs() < 1e-12);
        assert!((0.05..=0.95).contains(&epsilon(0.5)));
        assert_eq!(epsilon(7.0), epsilon(1.0));
    }

    #[test]
    fn threshold_policy_examples() {
        assert_eq!(threshold_policy(&[0.3, -0.2, 0.1, 0.0, -1.0], 0.0), vec![
            1.0 / 3.0,
            0.0,
            1.0 / 3.0,
            1.0 / 3.0,
            0.0
        ]);
        assert_eq!(threshold_policy(&[-0.3, -0.2, -0.5], 0.0), vec![0.0, 1.0, 0.0]);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn config_validation() {
        assert!(SbeConfig::default().validate().is_ok());
        let bad = SbeConfig {
            gamma: 1.0,
            ..SbeConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(serde_json::from_str::<SbeConfig>(r#"{"gamma": 0.99, "bogus": 1}"#).is_err());
        let partial: SbeConfig = serde_json::from_str(r#"{"gamma": 0.99}"#).unwrap();
        assert_eq!(partial.target_sync_episodes, 10);
    }

    #[test]
    fn short_run_logs_every_episode() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let initial = InitialStates::new(vec![PendulumState::new(0.0, 0.0)]).unwrap();
        let config = SbeConfig {
            total_episodes: 4,
            max_steps: 30,
            hidden: vec![8],
            batch_size: 8,
            target_sync_episodes: 2,
            ..SbeConfig::default()
        };
        let mut seen = 0;
        let run = train_sbe(&env, &config, &initial, 3, |row, _| {
            assert_eq!(row.episode, seen);
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(run.log.len(), 4);
        let total: usize = run.episodes.iter().filter(|e| e.failed).count();
        assert_eq!(*run.cumulative_failures().last().unwrap(), total);
        assert!(run.log.iter().map(|l| l.gradient_steps).sum::<usize>() > 0);
        let again = train_sbe(&env, &config, &initial, 3, |_, _| Ok(())).unwrap();
        assert_eq!(again.critic, run.critic);
    }

    #[test]
    fn terminal_targets_use_signed_distance() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let critic = SbeCritic::new(&[4], 5, &mut rng::seeded(0));
        let learner = Learner {
            target: critic.clone(),
            adam: Adam::new(critic.net.num_params()),
            online: critic,
            gamma: 0.9,
        };
        let fallen = PendulumState::new(2.0, 0.0);
        let edge = PendulumState::new(1.5, 1.0);
        let from_failure = TransitionRecord { state: fallen, action: 0, insecure: true, next: fallen };
        let into_failure = TransitionRecord { state: edge, action: 0, insecure: false, next: fallen };
        let y = learner.targets(&env, &[&from_failure, &into_failure]);
        let h_fallen = std::f64::consts::FRAC_PI_2 - 2.0;
        let h_edge = std::f64::consts::FRAC_PI_2 - 1.5;
        assert!((y[0] - h_fallen).abs() < 1e-15);
        assert!((y[1] - (0.1 * h_edge + 0.9 * h_fallen)).abs() < 1e-15);
    }
}
