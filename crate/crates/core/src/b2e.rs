//! Self-consistency training of a neural binary critic.
//!
//! The critic is fitted to an axiomatic safe dataset, then the loop alternates
//! between collecting episodes with the uniform-safe policy, labeling stored
//! transitions with the critic's own bootstrap targets, and retraining until
//! the hard predictions agree with every label. A round ends once a fresh
//! relabeling leaves the accuracy at 1.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::pendulum::OBSERVATION_DIM;
use crate::env::{Pendulum, PendulumState};
use crate::neural::{self, hard_label, Adam, BatchRow, Mlp, OutputActivation};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// Rows per forward call when evaluating large state sets.
const EVAL_CHUNK: usize = 2048;

/// Tolerance under which a relabeled sample is considered to coincide with
/// an axiom.
pub const AXIOM_TOLERANCE: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

/// Neural binary critic: one sigmoid output per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralCritic {
    pub net: Mlp,
}

pub fn observations(states: &[PendulumState]) -> Vec<f64> {
    states.iter().flat_map(|s| s.observation()).collect()
}

impl NeuralCritic {
    pub fn new(hidden: &[usize], num_actions: usize, rng: &mut SeededRng) -> Self {
        Self {
            net: Mlp::init(&layer_sizes(hidden, num_actions), OutputActivation::Sigmoid, rng),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    /// Soft values `b(s, .)` in `(0, 1)`.
    pub fn values(&self, state: &PendulumState) -> Vec<f64> {
        self.net
            .forward(&state.observation())
            .expect("observation dimension fixed by construction")
    }

    /// Soft values for many states, row-major `states x actions`.
    pub fn values_batch(&self, states: &[PendulumState]) -> Vec<f64> {
        let mut out = Vec::with_capacity(states.len() * self.num_actions());
        for chunk in states.chunks(EVAL_CHUNK) {
            out.extend(
                self.net
                    .forward_batch(&observations(chunk))
                    .expect("observation dimension fixed by construction"),
            );
        }
        out
    }

    pub fn hard_values(&self, state: &PendulumState) -> Vec<bool> {
        self.values(state).into_iter().map(hard_label).collect()
    }
}

pub fn layer_sizes(hidden: &[usize], num_actions: usize) -> Vec<usize> {
    let mut sizes = vec![OBSERVATION_DIM];
    sizes.extend_from_slice(hidden);
    sizes.push(num_actions);
    sizes
}

/// Uniform over the actions whose hard label is safe. When every action is
/// labeled unsafe, uniform over the actions of minimal soft value.
pub fn uniform_safe_policy(soft_values: &[f64]) -> Vec<f64> {
    let safe = soft_values.iter().filter(|&&v| !hard_label(v)).count();
    if safe > 0 {
        let p = 1.0 / safe as f64;
        return soft_values
            .iter()
            .map(|&v| if hard_label(v) { 0.0 } else { p })
            .collect();
    }
    let least = soft_values.iter().copied().fold(f64::INFINITY, f64::min);
    let ties = soft_values.iter().filter(|&&v| v == least).count();
    soft_values
        .iter()
        .map(|&v| if v == least { 1.0 / ties as f64 } else { 0.0 })
        .collect()
}

/// Draws an action index from a probability vector.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = a;
            if u < acc {
                return a;
            }
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// One stored transition `(s, a, i(s), s')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: PendulumState,
    pub action: usize,
    pub insecure: bool,
    pub next: PendulumState,
}

/// FIFO transition memory with a hard capacity.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<TransitionRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &TransitionRecord> {
        self.items.iter()
    }

    pub fn get(&self, index: usize) -> Option<&TransitionRecord> {
        self.items.get(index)
    }
}

/// `(s, a, y)` with `y = true` meaning unsafe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub state: PendulumState,
    pub action: usize,
    pub label: bool,
}

impl LabeledSample {
    fn coincides(&self, other: &LabeledSample) -> bool {
        self.action == other.action
            && (self.state.theta - other.state.theta).abs() <= AXIOM_TOLERANCE
            && (self.state.omega - other.state.omega).abs() <= AXIOM_TOLERANCE
    }
}

/// Axiomatic safe samples on a regular `points x points` state grid over
/// `[-theta_half, theta_half] x [-omega_half, omega_half]`, every action.
pub fn axiom_grid(
    theta_half: f64,
    omega_half: f64,
    points: usize,
    num_actions: usize,
) -> Vec<LabeledSample> {
    let axis = |half: f64| -> Vec<f64> {
        if points == 1 {
            return vec![0.0];
        }
        (0..points)
            .map(|k| -half + 2.0 * half * k as f64 / (points - 1) as f64)
            .collect()
    };
    let mut out = Vec::with_capacity(points * points * num_actions);
    for &theta in &axis(theta_half) {
        for &omega in &axis(omega_half) {
            for action in 0..num_actions {
                out.push(LabeledSample {
                    state: PendulumState::new(theta, omega),
                    action,
                    label: false,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnsafeDataset {
    pub samples: Vec<LabeledSample>,
    /// Transitions whose soft target rounds to safe, labeled 0.
    pub safe: Vec<LabeledSample>,
    /// Candidates dropped because they coincide with an axiom.
    pub dropped: usize,
}

/// Soft bootstrap targets `y = i(s) + (1 - i(s)) min_a' b(s', a')` for every
/// stored transition, in buffer order.
pub fn soft_labels(critic: &NeuralCritic, buffer: &ReplayBuffer) -> Vec<f64> {
    let nexts: Vec<PendulumState> = buffer.iter().map(|t| t.next).collect();
    let values = critic.values_batch(&nexts);
    let m = critic.num_actions();
    buffer
        .iter()
        .zip(values.chunks(m))
        .map(|(t, row)| {
            if t.insecure {
                1.0
            } else {
                row.iter().copied().fold(f64::INFINITY, f64::min)
            }
        })
        .collect()
}

/// Transitions whose soft target is at least one half, as unsafe samples.
/// Samples that coincide with an axiom are dropped.
pub fn build_unsafe_dataset(
    critic: &NeuralCritic,
    buffer: &ReplayBuffer,
    axioms: &[LabeledSample],
) -> UnsafeDataset {
    let labels: Vec<bool> = soft_labels(critic, buffer).into_iter().map(hard_label).collect();
    split_labels(buffer, &labels, axioms)
}

/// Hard targets where the bootstrap at `s'` uses, for the action actually
/// taken next along the same trajectory, that transition's own target
/// instead of the critic's prediction. Computed back to front, so a label
/// change travels the whole stored trajectory in one rebuild.
///
/// A critic whose predictions match these targets also matches the plain
/// targets of [`build_unsafe_dataset`] and vice versa, so both define the
/// same self-consistent critics.
pub fn anticipated_labels(critic: &NeuralCritic, buffer: &ReplayBuffer) -> Vec<bool> {
    let nexts: Vec<PendulumState> = buffer.iter().map(|t| t.next).collect();
    let values = critic.values_batch(&nexts);
    let m = critic.num_actions();
    let mut labels = vec![false; buffer.len()];
    for k in (0..buffer.len()).rev() {
        let t = buffer.get(k).expect("index in range");
        if t.insecure {
            labels[k] = true;
            continue;
        }
        let row = &values[k * m..(k + 1) * m];
        let successor = buffer.get(k + 1).filter(|u| u.state == t.next);
        labels[k] = match successor {
            Some(u) if u.insecure => true,
            Some(u) => row
                .iter()
                .enumerate()
                .all(|(a, &v)| if a == u.action { labels[k + 1] } else { hard_label(v) }),
            None => row.iter().all(|&v| hard_label(v)),
        };
    }
    labels
}

/// Splits hard targets into unsafe samples (dropping axiom collisions) and
/// safe samples.
pub fn split_labels(buffer: &ReplayBuffer, labels: &[bool], axioms: &[LabeledSample]) -> UnsafeDataset {
    assert_eq!(labels.len(), buffer.len());
    let mut out = UnsafeDataset::default();
    for (t, &label) in buffer.iter().zip(labels) {
        let sample = LabeledSample {
            state: t.state,
            action: t.action,
            label,
        };
        if !label {
            out.safe.push(sample);
        } else if axioms.iter().any(|ax| ax.coincides(&sample)) {
            out.dropped += 1;
        } else {
            out.samples.push(sample);
        }
    }
    out
}

/// For every stored insecure state, unsafe samples for the actions that were
/// not taken: `i(s) = 1` fixes the bootstrap target at 1 whatever the action.
pub fn insecure_action_samples(buffer: &ReplayBuffer, num_actions: usize) -> Vec<LabeledSample> {
    buffer
        .iter()
        .filter(|t| t.insecure)
        .flat_map(|t| {
            (0..num_actions)
                .filter(move |&a| a != t.action)
                .map(move |action| LabeledSample {
                    state: t.state,
                    action,
                    label: true,
                })
        })
        .collect()
}

/// Signed distance of each prediction from the threshold, positive when
/// the hard prediction matches the label. A value of exactly one half counts
/// as unsafe, so it is correct only for unsafe labels.
fn margins(critic: &NeuralCritic, data: &[LabeledSample]) -> Vec<f64> {
    let states: Vec<PendulumState> = data.iter().map(|s| s.state).collect();
    let values = critic.values_batch(&states);
    let m = critic.num_actions();
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let v = values[i * m + s.action];
            match (s.label, hard_label(v)) {
                (true, true) => v - 0.5 + f64::MIN_POSITIVE,
                (false, false) => 0.5 - v,
                (true, false) => v - 0.5,
                (false, true) => -(v - 0.5) - f64::MIN_POSITIVE,
            }
        })
        .collect()
}

/// Per-sample hard-prediction correctness.
fn correctness(critic: &NeuralCritic, data: &[LabeledSample]) -> Vec<bool> {
    let states: Vec<PendulumState> = data.iter().map(|s| s.state).collect();
    let values = critic.values_batch(&states);
    let m = critic.num_actions();
    data.iter()
        .enumerate()
        .map(|(i, s)| hard_label(values[i * m + s.action]) == s.label)
        .collect()
}

/// Fraction of samples whose hard prediction equals the label.
pub fn accuracy(critic: &NeuralCritic, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy dataset"));
    }
    let correct = correctness(critic, data).into_iter().filter(|&c| c).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Axioms, unsafe samples, and optionally the safe samples and the
/// unsafe samples for untaken actions at insecure states.
pub fn assemble_dataset(
    set: &UnsafeDataset,
    buffer: &ReplayBuffer,
    axioms: &[LabeledSample],
    num_actions: usize,
    with_safe: bool,
    expand_insecure: bool,
) -> Vec<LabeledSample> {
    let mut data = axioms.to_vec();
    data.extend_from_slice(&set.samples);
    if with_safe {
        data.extend_from_slice(&set.safe);
    }
    if expand_insecure {
        data.extend(insecure_action_samples(buffer, num_actions));
    }
    data
}

/// Self-consistency of a critic on a buffer after one rebuild.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Size of the rebuilt training dataset.
    pub samples: usize,
    pub accuracy: f64,
    pub misclassified: usize,
    pub unsafe_samples: usize,
    pub dropped: usize,
    /// Stored transitions whose target rounds to unsafe while the critic
    /// predicts safe. Zero is the condition the uniform-safe policy needs.
    pub unsafe_missed: usize,
    /// Stored transitions whose target rounds to safe while the critic
    /// predicts unsafe. The trainer only drives these to zero when it fits
    /// safe transitions.
    pub safe_missed: usize,
}

impl ConsistencyReport {
    pub fn consistent(&self) -> bool {
        self.misclassified == 0
    }
}

/// Rebuilds the dataset the trainer would fit under `config` and checks the
/// critic against it and against every stored transition.
pub fn consistency_report(
    critic: &NeuralCritic,
    buffer: &ReplayBuffer,
    axioms: &[LabeledSample],
    config: &TrainConfig,
) -> ConsistencyReport {
    let set = build_unsafe_dataset(critic, buffer, axioms);
    let data = assemble_dataset(
        &set,
        buffer,
        axioms,
        critic.num_actions(),
        config.fit_safe_transitions,
        config.expand_insecure,
    );
    let misclassified = correctness(critic, &data).into_iter().filter(|&c| !c).count();
    let targets: Vec<bool> = soft_labels(critic, buffer).into_iter().map(hard_label).collect();
    let states: Vec<PendulumState> = buffer.iter().map(|t| t.state).collect();
    let values = critic.values_batch(&states);
    let m = critic.num_actions();
    let (mut unsafe_missed, mut safe_missed) = (0, 0);
    for (k, (t, &y)) in buffer.iter().zip(&targets).enumerate() {
        let predicted = hard_label(values[k * m + t.action]);
        match (y, predicted) {
            (true, false) => unsafe_missed += 1,
            (false, true) => safe_missed += 1,
            _ => {}
        }
    }
    ConsistencyReport {
        samples: data.len(),
        accuracy: if data.is_empty() {
            1.0
        } else {
            1.0 - misclassified as f64 / data.len() as f64
        },
        misclassified,
        unsafe_samples: set.samples.len(),
        dropped: set.dropped,
        unsafe_missed,
        safe_missed,
    }
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub length: usize,
    pub failed: bool,
}

/// Runs one episode from `start`: at each step the current state is recorded
/// with the chosen action and its successor; the episode stops after
/// recording an insecure state or after `max_steps` records.
pub fn rollout(
    env: &Pendulum,
    start: PendulumState,
    max_steps: usize,
    mut choose: impl FnMut(&PendulumState) -> usize,
    mut record: impl FnMut(TransitionRecord),
) -> EpisodeSummary {
    let mut state = start;
    for step in 1..=max_steps {
        let action = choose(&state);
        let next = env.pendulum_step(state, action);
        let insecure = env.is_failure(&state);
        record(TransitionRecord {
            state,
            action,
            insecure,
            next,
        });
        if insecure {
            return EpisodeSummary {
                length: step,
                failed: true,
            };
        }
        state = next;
    }
    EpisodeSummary {
        length: max_steps,
        failed: false,
    }
}

/// Uniform distribution over a finite list of start states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStates {
    pub states: Vec<PendulumState>,
}

impl InitialStates {
    pub fn new(states: Vec<PendulumState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Empty("initial-state support"));
        }
        Ok(Self { states })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PendulumState {
        self.states[rng.random_range(0..self.states.len())]
    }
}

/// Runs `count` episodes under the uniform-safe policy of `critic`, appending
/// every transition to `buffer`.
pub fn run_episodes(
    env: &Pendulum,
    critic: &NeuralCritic,
    initial: &InitialStates,
    count: usize,
    max_steps: usize,
    buffer: &mut ReplayBuffer,
    rng: &mut SeededRng,
) -> Vec<EpisodeSummary> {
    (0..count)
        .map(|_| {
            let start = initial.sample(rng);
            let mut choose_rng = rng.clone();
            let summary = rollout(
                env,
                start,
                max_steps,
                |s| sample_action(&uniform_safe_policy(&critic.values(s)), &mut choose_rng),
                |t| buffer.push(t),
            );
            *rng = choose_rng;
            summary
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_episodes: usize,
    pub episodes_per_round: usize,
    pub max_steps: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_passes: usize,
    pub axiom_theta: f64,
    pub axiom_omega: f64,
    pub axiom_points: usize,
    /// Also fit transitions whose bootstrap target rounds to safe.
    pub fit_safe_transitions: bool,
    /// Label every action of a stored insecure state unsafe.
    pub expand_insecure: bool,
    /// Train on [`anticipated_labels`]; the consistency check still uses
    /// the plain targets. Only used together with `fit_safe_transitions`.
    pub anticipate: bool,
    /// See [`CriticFitter::focused`].
    pub focused_fit: bool,
    /// Learning rate at the first round, interpolated linearly to `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_episodes: 500,
            episodes_per_round: 10,
            max_steps: 200,
            hidden: vec![256, 256],
            buffer_capacity: 50_000,
            batch_size: 64,
            max_epochs: 2000,
            max_passes: 50,
            axiom_theta: 0.15,
            axiom_omega: 0.15,
            axiom_points: 5,
            fit_safe_transitions: false,
            expand_insecure: true,
            anticipate: true,
            focused_fit: true,
            lr_start: LR_START,
            lr_end: LR_END,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_episodes", self.total_episodes),
            ("episodes_per_round", self.episodes_per_round),
            ("max_steps", self.max_steps),
            ("buffer_capacity", self.buffer_capacity),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_passes", self.max_passes),
            ("axiom_points", self.axiom_points),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("train.hidden must list positive widths".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("train.lr_start and train.lr_end must be positive".into()));
        }
        if !(self.axiom_theta >= 0.0 && self.axiom_omega >= 0.0) {
            return Err(Error::Config("train.axiom_theta/omega must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn axioms(&self, num_actions: usize) -> Vec<LabeledSample> {
        axiom_grid(self.axiom_theta, self.axiom_omega, self.axiom_points, num_actions)
    }
}

/// Outcome of one inner fitting loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub epochs: usize,
    pub accuracy: f64,
    pub misclassified: usize,
}

impl FitOutcome {
    pub fn perfect(&self) -> bool {
        self.misclassified == 0
    }
}

/// Result of the consistency loop over one buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyOutcome {
    pub consistent: bool,
    pub passes: usize,
    pub epochs: usize,
    pub unsafe_samples: usize,
    pub dropped: usize,
    /// Accuracy right after each relabeling.
    pub accuracy_trace: Vec<f64>,
    pub final_accuracy: f64,
    /// Misclassified samples when the loop gave up (0 on success).
    pub conflicts: usize,
    /// Up to [`MAX_REPORTED_CONFLICTS`] of those samples.
    pub conflict_samples: Vec<LabeledSample>,
}

pub const MAX_REPORTED_CONFLICTS: usize = 16;

/// Correctly classified samples swept alongside each misclassified one.
pub const REHEARSAL: usize = 3;

/// Cap on repeated sweeps of one working set before the full dataset is
/// re-checked.
pub const FOCUS_SWEEPS: usize = 64;

/// Network, optimizer and shuffling stream for the supervised part.
#[derive(Debug, Clone)]
pub struct CriticFitter {
    pub critic: NeuralCritic,
    adam: Adam,
    shuffle: SeededRng,
    pub batch_size: usize,
    pub fit_safe_transitions: bool,
    pub expand_insecure: bool,
    pub anticipate: bool,
    /// Sweep working sets around the misclassified samples instead of the
    /// whole dataset.
    pub focused: bool,
}

impl CriticFitter {
    pub fn new(critic: NeuralCritic, batch_size: usize, shuffle: SeededRng) -> Self {
        let adam = Adam::new(critic.net.num_params());
        Self {
            critic,
            adam,
            shuffle,
            batch_size,
            fit_safe_transitions: false,
            expand_insecure: true,
            anticipate: true,
            focused: false,
        }
    }

    fn assemble(
        &self,
        set: &UnsafeDataset,
        buffer: &ReplayBuffer,
        axioms: &[LabeledSample],
    ) -> Vec<LabeledSample> {
        assemble_dataset(
            set,
            buffer,
            axioms,
            self.critic.num_actions(),
            self.fit_safe_transitions,
            self.expand_insecure,
        )
    }

    fn evaluate(&self, data: &[LabeledSample]) -> FitOutcome {
        let misclassified = correctness(&self.critic, data).into_iter().filter(|&c| !c).count();
        FitOutcome {
            epochs: 0,
            accuracy: 1.0 - misclassified as f64 / data.len() as f64,
            misclassified,
        }
    }

    /// Minibatch BCE training on `data` until every hard prediction matches
    /// its label or `max_epochs` epochs have run.
    ///
    /// An epoch is one shuffled pass over `data`. With [`Self::focused`] set,
    /// an epoch instead sweeps a working set: every misclassified sample, the
    /// [`REHEARSAL`] correctly classified samples per misclassified one that
    /// sit closest to the threshold, and as many more drawn at random. Small
    /// datasets are swept whole. The working set is swept until it is
    /// classified correctly, or [`FOCUS_SWEEPS`] times, before the epoch ends
    /// with a check of the whole dataset.
    pub fn fit(&mut self, data: &[LabeledSample], max_epochs: usize, lr: f64) -> Result<FitOutcome> {
        if data.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        let obs: Vec<[f64; OBSERVATION_DIM]> = data.iter().map(|s| s.state.observation()).collect();
        let mut margin = margins(&self.critic, data);
        let mut epochs = 0;
        loop {
            let (mut working, mut right): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| margin[i] <= 0.0);
            if working.is_empty() || epochs >= max_epochs {
                break;
            }
            let extra = working.len() * REHEARSAL;
            if !self.focused || working.len() + 2 * extra >= data.len() {
                working = (0..data.len()).collect();
            } else {
                right.sort_by(|&i, &j| margin[i].total_cmp(&margin[j]).then(i.cmp(&j)));
                working.extend_from_slice(&right[..extra]);
                let rest = &mut right[extra..];
                let (picked, _) = rest.partial_shuffle(&mut self.shuffle, extra);
                working.extend_from_slice(picked);
            }
            let subset: Vec<LabeledSample> = working.iter().map(|&i| data[i]).collect();
            for sweep in 1..=FOCUS_SWEEPS {
                working.shuffle(&mut self.shuffle);
                for chunk in working.chunks(self.batch_size) {
                    let batch: Vec<BatchRow<'_>> = chunk
                        .iter()
                        .map(|&i| BatchRow {
                            observation: &obs[i],
                            action: data[i].action,
                            label: data[i].label,
                        })
                        .collect();
                    let (loss, grad) = neural::bce_loss_and_grad(&self.critic.net, &batch)?;
                    if !loss.is_finite() {
                        return Err(Error::NotConverged(format!("non-finite loss at epoch {epochs}")));
                    }
                    self.adam.update(self.critic.net.params_mut(), &grad, lr);
                }
                if working.len() == data.len() || sweep == FOCUS_SWEEPS {
                    break;
                }
                if margins(&self.critic, &subset).into_iter().all(|m| m > 0.0) {
                    break;
                }
            }
            epochs += 1;
            margin = margins(&self.critic, data);
        }
        let misclassified = margin.iter().filter(|&&m| m <= 0.0).count();
        Ok(FitOutcome {
            epochs,
            accuracy: 1.0 - misclassified as f64 / data.len() as f64,
            misclassified,
        })
    }

    /// Fits the axioms alone.
    pub fn initialize_from_safe(
        &mut self,
        axioms: &[LabeledSample],
        max_epochs: usize,
        lr: f64,
    ) -> Result<FitOutcome> {
        let outcome = self.fit(axioms, max_epochs, lr)?;
        if !outcome.perfect() {
            return Err(Error::NotConverged(format!(
                "axioms not fitted after {} epochs (accuracy {:.4})",
                outcome.epochs, outcome.accuracy
            )));
        }
        Ok(outcome)
    }

    /// Relabel, check, retrain; repeat until a relabeling leaves the accuracy
    /// at 1 or the caps are hit.
    pub fn train_until_consistent(
        &mut self,
        buffer: &ReplayBuffer,
        axioms: &[LabeledSample],
        max_epochs: usize,
        max_passes: usize,
        lr: f64,
    ) -> Result<ConsistencyOutcome> {
        if axioms.is_empty() {
            return Err(Error::Empty("axiomatic safe dataset"));
        }
        let mut result = ConsistencyOutcome {
            consistent: false,
            passes: 0,
            epochs: 0,
            unsafe_samples: 0,
            dropped: 0,
            accuracy_trace: Vec::new(),
            final_accuracy: 0.0,
            conflicts: 0,
            conflict_samples: Vec::new(),
        };
        for pass in 1..=max_passes {
            let unsafe_set = build_unsafe_dataset(&self.critic, buffer, axioms);
            let data = self.assemble(&unsafe_set, buffer, axioms);
            result.passes = pass;
            result.unsafe_samples = unsafe_set.samples.len();
            result.dropped = unsafe_set.dropped;
            let check = self.evaluate(&data);
            result.accuracy_trace.push(check.accuracy);
            result.final_accuracy = check.accuracy;
            result.conflicts = check.misclassified;
            if check.perfect() {
                result.consistent = true;
                return Ok(result);
            }
            let targets = if self.anticipate && self.fit_safe_transitions {
                let labels = anticipated_labels(&self.critic, buffer);
                self.assemble(&split_labels(buffer, &labels, axioms), buffer, axioms)
            } else {
                data
            };
            let fit = self.fit(&targets, max_epochs, lr)?;
            result.epochs += fit.epochs;
            result.final_accuracy = fit.accuracy;
            result.conflicts = fit.misclassified;
            if !fit.perfect() {
                result.conflict_samples = correctness(&self.critic, &targets)
                    .into_iter()
                    .zip(&targets)
                    .filter(|(ok, _)| !ok)
                    .map(|(_, s)| *s)
                    .take(MAX_REPORTED_CONFLICTS)
                    .collect();
                return Ok(result);
            }
        }
        Ok(result)
    }
}

/// Per-round training log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub episodes: usize,
    pub buffer_len: usize,
    pub unsafe_samples: usize,
    pub dropped: usize,
    pub inner_epochs: usize,
    pub passes: usize,
    pub consistent: bool,
    pub accuracy_trace: Vec<f64>,
    pub final_accuracy: f64,
    pub conflicts: usize,
    pub conflict_samples: Vec<LabeledSample>,
    pub round_failures: usize,
    pub cumulative_failures: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct B2eRun {
    pub critic: NeuralCritic,
    pub buffer: ReplayBuffer,
    pub axioms: Vec<LabeledSample>,
    pub episodes: Vec<EpisodeSummary>,
    pub rounds: Vec<RoundLog>,
    pub init: FitOutcome,
}

impl B2eRun {
    pub fn cumulative_failures(&self) -> Vec<usize> {
        cumulative(&self.episodes)
    }
}

pub fn cumulative(episodes: &[EpisodeSummary]) -> Vec<usize> {
    episodes
        .iter()
        .scan(0, |acc, e| {
            *acc += usize::from(e.failed);
            Some(*acc)
        })
        .collect()
}

/// Default learning-rate endpoints of the binary critic.
pub const LR_START: f64 = 10.0 * neural::LR_START;
pub const LR_END: f64 = 10.0 * neural::LR_END;

const STREAM_INIT: u64 = 1;
const STREAM_EPISODES: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Full training run. `on_round` sees every round log with the critic and
/// buffer after it.
pub fn train_b2e(
    env: &Pendulum,
    config: &TrainConfig,
    initial: &InitialStates,
    seed: u64,
    mut on_round: impl FnMut(&RoundLog, &NeuralCritic, &ReplayBuffer) -> Result<()>,
) -> Result<B2eRun> {
    config.validate()?;
    let m = env.params.torque_levels;
    let critic = NeuralCritic::new(&config.hidden, m, &mut rng::stream(seed, STREAM_INIT));
    let mut fitter = CriticFitter::new(critic, config.batch_size, rng::stream(seed, STREAM_SHUFFLE));
    fitter.fit_safe_transitions = config.fit_safe_transitions;
    fitter.expand_insecure = config.expand_insecure;
    fitter.anticipate = config.anticipate;
    fitter.focused = config.focused_fit;
    let axioms = config.axioms(m);
    let init = fitter.initialize_from_safe(&axioms, config.max_epochs, config.lr_start)?;

    let mut episode_rng = rng::stream(seed, STREAM_EPISODES);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut episodes = Vec::with_capacity(config.total_episodes);
    let mut rounds = Vec::new();
    let mut failures = 0;
    while episodes.len() < config.total_episodes {
        let count = config
            .episodes_per_round
            .min(config.total_episodes - episodes.len());
        let batch = run_episodes(
            env,
            &fitter.critic,
            initial,
            count,
            config.max_steps,
            &mut buffer,
            &mut episode_rng,
        );
        let round_failures = batch.iter().filter(|e| e.failed).count();
        failures += round_failures;
        episodes.extend(batch);

        let progress = episodes.len() as f64 / config.total_episodes as f64;
        let lr = neural::interpolate_lr(progress, config.lr_start, config.lr_end);
        let outcome = fitter.train_until_consistent(
            &buffer,
            &axioms,
            config.max_epochs,
            config.max_passes,
            lr,
        )?;
        let log = RoundLog {
            round: rounds.len(),
            episodes: episodes.len(),
            buffer_len: buffer.len(),
            unsafe_samples: outcome.unsafe_samples,
            dropped: outcome.dropped,
            inner_epochs: outcome.epochs,
            passes: outcome.passes,
            consistent: outcome.consistent,
            accuracy_trace: outcome.accuracy_trace,
            final_accuracy: outcome.final_accuracy,
            conflicts: outcome.conflicts,
            conflict_samples: outcome.conflict_samples,
            round_failures,
            cumulative_failures: failures,
            learning_rate: lr,
        };
        on_round(&log, &fitter.critic, &buffer)?;
        rounds.push(log);
    }
    Ok(B2eRun {
        critic: fitter.critic,
        buffer,
        axioms,
        episodes,
        rounds,
        init,
    })
}
