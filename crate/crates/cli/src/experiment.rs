//! Pieces shared by training, evaluation and the acceptance suite: the
//! oracle-backed start distribution and post-training metrics.

use safecritic::b2e::{InitialStates, NeuralCritic};
use safecritic::env::{Pendulum, PendulumState};
use safecritic::eval::{
    self, avg_entropy, false_safe_from_raster, B2ePolicy, PolicyMetrics, SafeRaster, SbePolicy,
};
use safecritic::oracle::{grid_oracle_pendulum, PendulumOracle};
use safecritic::rng;
use safecritic::sbe::SbeCritic;

use crate::config::{RunConfig, StartRegion};
use crate::CliResult;

/// Random stream of a run's seed reserved for evaluation rollouts.
const STREAM_EVAL: u64 = 17;

/// Environment, oracle and the state sets derived from them.
pub struct Setup {
    pub env: Pendulum,
    pub oracle: PendulumOracle,
    pub initial: InitialStates,
    /// Cell centers of the oracle reach-avoid set grown from the axiom states.
    pub reach_avoid: Vec<PendulumState>,
}

impl Setup {
    pub fn new(config: &RunConfig) -> CliResult<Self> {
        let env = Pendulum::new(config.env)?;
        let oracle = grid_oracle_pendulum(config.env, config.resolution)?;
        let cells = match config.initial.region {
            StartRegion::OracleSafe => oracle.safe.members().collect(),
            StartRegion::Box => {
                oracle.safe_cells_in_box(config.initial.box_theta, config.initial.box_omega)
            }
        };
        let initial = InitialStates::new(cells.into_iter().map(|c| oracle.spec().center(c)).collect())?;
        let seeds = axiom_states(config);
        let reach_avoid = eval::reach_avoid_states(&oracle, &seeds);
        Ok(Self {
            env,
            oracle,
            initial,
            reach_avoid,
        })
    }
}

/// Distinct states of the axiomatic safe dataset.
pub fn axiom_states(config: &RunConfig) -> Vec<PendulumState> {
    let mut states: Vec<PendulumState> = config
        .b2e
        .axioms(config.env.torque_levels)
        .into_iter()
        .map(|s| s.state)
        .collect();
    states.dedup();
    states
}

/// One evaluated policy with its classification raster.
pub struct Evaluated {
    pub metrics: PolicyMetrics,
    pub raster: SafeRaster,
}

fn metrics_for(
    setup: &Setup,
    config: &RunConfig,
    seed: u64,
    label: String,
    eta: Option<f64>,
    policy: &dyn eval::ActionPolicy,
    classifier: &dyn eval::SafetyClassifier,
) -> CliResult<Evaluated> {
    // every policy of a run sees the same start states
    let mut r = rng::stream(seed, STREAM_EVAL);
    let safety = eval::safety_rate(
        &setup.env,
        policy,
        &setup.initial,
        config.eval.episodes,
        config.eval.horizon,
        &mut r,
    )?;
    let raster = SafeRaster::compute(classifier, setup.oracle.spec());
    let false_safe = false_safe_from_raster(&raster, &setup.oracle.safe);
    Ok(Evaluated {
        metrics: PolicyMetrics {
            label,
            eta,
            safety,
            avg_entropy: avg_entropy(policy, &setup.reach_avoid)?,
            false_safe,
        },
        raster,
    })
}

/// Uniform-safe policy of a binary critic.
pub fn evaluate_b2e(
    setup: &Setup,
    config: &RunConfig,
    critic: &NeuralCritic,
    seed: u64,
) -> CliResult<Evaluated> {
    let policy = B2ePolicy(critic);
    metrics_for(setup, config, seed, "uniform_safe".into(), None, &policy, &policy)
}

/// One threshold policy per entry of `config.etas`.
pub fn evaluate_sbe(
    setup: &Setup,
    config: &RunConfig,
    critic: &SbeCritic,
    seed: u64,
) -> CliResult<Vec<Evaluated>> {
    config
        .etas
        .iter()
        .map(|&eta| {
            let policy = SbePolicy { critic, eta };
            metrics_for(setup, config, seed, format!("threshold_{eta}"), Some(eta), &policy, &policy)
        })
        .collect()
}
