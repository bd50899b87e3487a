//! Subcommand implementations.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use safecritic::atlas::{self, InstanceReport};
use safecritic::b2e::{self, NeuralCritic, RoundLog};
use safecritic::eval::{self, EvalReport, FiguresData};
use safecritic::neural::{Checkpoint, Mlp, OutputActivation};
use safecritic::oracle::{self, grid_oracle_pendulum, sha256_hex, write_mask, SafeSetMask};
use safecritic::sbe::{self, SbeCritic, SbeEpisodeLog};
use safecritic::env::pendulum::OBSERVATION_DIM;

use crate::config::{Algorithm, RunConfig};
use crate::experiment::{self, Evaluated, Setup};
use crate::{write_file, write_json, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    safecritic::Error::io(path, e).into()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_config(dir: &Path, config: &RunConfig) -> CliResult<()> {
    write_file(&dir.join(CONFIG_FILE), &config.to_toml())
}

/// Short identifier of one seed's run under a given configuration.
pub fn run_id(config: &RunConfig, seed: u64) -> String {
    sha256_hex(&format!("{}:{seed}", config.hash()))[..12].to_string()
}

pub fn seed_dir(algo_dir: &Path, seed: u64) -> PathBuf {
    algo_dir.join(format!("seed_{seed}"))
}

/// Appends lines to a log file, surfacing the path on failure.
struct LineLog {
    path: PathBuf,
    file: File,
}

impl LineLog {
    fn create(path: PathBuf, header: Option<&str>) -> CliResult<Self> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut log = Self { path, file };
        if let Some(h) = header {
            log.line(h)?;
        }
        Ok(log)
    }

    fn line(&mut self, text: &str) -> CliResult<()> {
        writeln!(self.file, "{text}").map_err(|e| io_err(&self.path, e))
    }

    fn json<T: Serialize>(&mut self, value: &T) -> CliResult<()> {
        let text = serde_json::to_string(value).map_err(|e| safecritic::Error::json(&self.path, e))?;
        self.line(&text)
    }
}

/// Converts a callback error into the core error type expected by the
/// training loops.
fn to_core(e: CliError) -> safecritic::Error {
    match e {
        CliError::Core(inner) => inner,
        other => safecritic::Error::NotConverged(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

const ROUND_CSV_HEADER: &str = "round,episodes,buffer_len,unsafe_samples,dropped,inner_epochs,passes,consistent,final_accuracy,conflicts,round_failures,cumulative_failures,learning_rate";

fn round_csv(log: &RoundLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        log.round,
        log.episodes,
        log.buffer_len,
        log.unsafe_samples,
        log.dropped,
        log.inner_epochs,
        log.passes,
        log.consistent,
        log.final_accuracy,
        log.conflicts,
        log.round_failures,
        log.cumulative_failures,
        log.learning_rate
    )
}

const EPISODE_CSV_HEADER: &str =
    "episode,length,failed,cumulative_failures,epsilon,learning_rate,mean_loss,gradient_steps";

fn episode_csv(log: &SbeEpisodeLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        log.episode,
        log.length,
        log.failed,
        log.cumulative_failures,
        log.epsilon,
        log.learning_rate,
        log.mean_loss,
        log.gradient_steps
    )
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    algo: &'a str,
    seed: u64,
    error: String,
    completed_units: usize,
    last_round: Option<&'a RoundLog>,
    last_episode: Option<&'a SbeEpisodeLog>,
}

/// Per-seed outcome of `train`.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub run_id: String,
    pub dir: PathBuf,
    pub cumulative_failures: usize,
    pub report: EvalReport,
    /// Present for binary critics.
    pub consistency: Option<b2e::ConsistencyReport>,
}

fn finish_report(
    setup: &Setup,
    dir: &Path,
    mut report: EvalReport,
    evaluated: Vec<Evaluated>,
    cumulative: Vec<usize>,
) -> CliResult<EvalReport> {
    report.cumulative_failures = cumulative;
    let mut rasters = Vec::with_capacity(evaluated.len());
    for e in evaluated {
        report.policies.push(e.metrics);
        rasters.push(e.raster);
    }
    let data = FiguresData { report, rasters };
    eval::export_figures_data(&data, &setup.oracle.safe, dir)?;
    Ok(data.report)
}

fn train_b2e_seed(
    config: &RunConfig,
    setup: &Setup,
    dir: &Path,
    seed: u64,
    progress: bool,
) -> CliResult<SeedSummary> {
    let mut jsonl = LineLog::create(dir.join("rounds.jsonl"), None)?;
    let mut csv = LineLog::create(dir.join("rounds.csv"), Some(ROUND_CSV_HEADER))?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let mut last: Option<RoundLog> = None;
    let result = b2e::train_b2e(&setup.env, &config.b2e, &setup.initial, seed, |log, critic, _| {
        last = Some(log.clone());
        let mut write = || -> CliResult<()> {
            jsonl.json(log)?;
            csv.line(&round_csv(log))?;
            Checkpoint::new("b2e", seed, log.episodes, critic.net.clone()).save(&checkpoint_path)?;
            Ok(())
        };
        write().map_err(to_core)?;
        if progress {
            eprintln!(
                "b2e seed {seed} round {} episodes {} failures {} consistent {} passes {} epochs {}",
                log.round, log.episodes, log.cumulative_failures, log.consistent, log.passes, log.inner_epochs
            );
        }
        if config.abort_on_inconsistent && !log.consistent {
            return Err(safecritic::Error::NotConverged(format!(
                "round {} inconsistent after {} passes: accuracy {:.6}, {} conflicting samples",
                log.round, log.passes, log.final_accuracy, log.conflicts
            )));
        }
        Ok(())
    });
    let run = match result {
        Ok(run) => run,
        Err(e) => {
            let path = dir.join("diagnostics.json");
            write_json(
                &path,
                &Diagnostics {
                    algo: "b2e",
                    seed,
                    error: e.to_string(),
                    completed_units: last.as_ref().map_or(0, |l| l.round + 1),
                    last_round: last.as_ref(),
                    last_episode: None,
                },
            )?;
            return Err(CliError::TrainingAborted {
                message: e.to_string(),
                diagnostics: path,
            });
        }
    };
    Checkpoint::new("b2e", seed, run.episodes.len(), run.critic.net.clone()).save(&checkpoint_path)?;
    let consistency = b2e::consistency_report(&run.critic, &run.buffer, &run.axioms, &config.b2e);
    write_json(&dir.join("consistency.json"), &consistency)?;
    let evaluated = experiment::evaluate_b2e(setup, config, &run.critic, seed)?;
    let id = run_id(config, seed);
    let report = EvalReport::new("b2e", seed, &id, &config.hash());
    let cumulative = run.cumulative_failures();
    let report = finish_report(setup, dir, report, vec![evaluated], cumulative.clone())?;
    Ok(SeedSummary {
        seed,
        run_id: id,
        dir: dir.to_path_buf(),
        cumulative_failures: cumulative.last().copied().unwrap_or(0),
        report,
        consistency: Some(consistency),
    })
}

fn train_sbe_seed(
    config: &RunConfig,
    setup: &Setup,
    dir: &Path,
    seed: u64,
    progress: bool,
) -> CliResult<SeedSummary> {
    let mut jsonl = LineLog::create(dir.join("episodes.jsonl"), None)?;
    let mut csv = LineLog::create(dir.join("episodes.csv"), Some(EPISODE_CSV_HEADER))?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let every = config.sbe.target_sync_episodes;
    let mut last: Option<SbeEpisodeLog> = None;
    let result = sbe::train_sbe(&setup.env, &config.sbe, &setup.initial, seed, |log, critic| {
        last = Some(*log);
        let mut write = || -> CliResult<()> {
            jsonl.json(log)?;
            csv.line(&episode_csv(log))?;
            if (log.episode + 1) % every == 0 {
                Checkpoint::new("sbe", seed, log.episode + 1, critic.net.clone()).save(&checkpoint_path)?;
            }
            Ok(())
        };
        write().map_err(to_core)?;
        if progress && (log.episode + 1) % every == 0 {
            eprintln!(
                "sbe seed {seed} episode {} failures {} epsilon {:.3}",
                log.episode + 1,
                log.cumulative_failures,
                log.epsilon
            );
        }
        Ok(())
    });
    let run = match result {
        Ok(run) => run,
        Err(e) => {
            let path = dir.join("diagnostics.json");
            write_json(
                &path,
                &Diagnostics {
                    algo: "sbe",
                    seed,
                    error: e.to_string(),
                    completed_units: last.map_or(0, |l| l.episode + 1),
                    last_round: None,
                    last_episode: last.as_ref(),
                },
            )?;
            return Err(CliError::TrainingAborted {
                message: e.to_string(),
                diagnostics: path,
            });
        }
    };
    Checkpoint::new("sbe", seed, run.log.len(), run.critic.net.clone()).save(&checkpoint_path)?;
    let evaluated = experiment::evaluate_sbe(setup, config, &run.critic, seed)?;
    let id = run_id(config, seed);
    let report = EvalReport::new("sbe", seed, &id, &config.hash());
    let cumulative = run.cumulative_failures();
    let report = finish_report(setup, dir, report, evaluated, cumulative.clone())?;
    Ok(SeedSummary {
        seed,
        run_id: id,
        dir: dir.to_path_buf(),
        cumulative_failures: cumulative.last().copied().unwrap_or(0),
        report,
        consistency: None,
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    algo: &'a str,
    config_hash: String,
    seeds: Vec<u64>,
    runs: &'a [SeedSummary],
}

/// Trains `config.algorithm` (b2e or sbe) once per seed under
/// `<root>/<algo>/seed_<seed>` and writes the cross-seed failure curve
/// band to `<root>/<algo>/aggregate.csv`.
pub fn cmd_train(config: &RunConfig, output: Option<&Path>, progress: bool) -> CliResult<PathBuf> {
    train_runs(config, output, progress).map(|(dir, _)| dir)
}

/// [`cmd_train`] that also hands back the per-seed summaries.
pub fn train_runs(
    config: &RunConfig,
    output: Option<&Path>,
    progress: bool,
) -> CliResult<(PathBuf, Vec<SeedSummary>)> {
    let algo = config.algorithm;
    if !matches!(algo, Algorithm::B2e | Algorithm::Sbe) {
        return Err(CliError::Config(format!(
            "algorithm: train needs b2e or sbe, got {}",
            algo.name()
        )));
    }
    let algo_dir = config.output_root(output).join(algo.name());
    create_dir(&algo_dir)?;
    write_config(&algo_dir, config)?;
    let setup = Setup::new(config)?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = seed_dir(&algo_dir, seed);
        create_dir(&dir)?;
        write_config(&dir, config)?;
        let summary = match algo {
            Algorithm::B2e => train_b2e_seed(config, &setup, &dir, seed, progress)?,
            _ => train_sbe_seed(config, &setup, &dir, seed, progress)?,
        };
        runs.push(summary);
    }
    let curves: Vec<Vec<usize>> = runs.iter().map(|r| r.report.cumulative_failures.clone()).collect();
    let band = eval::aggregate_curves(&curves)?;
    write_file(&algo_dir.join("aggregate.csv"), &eval::aggregate_csv(&band))?;
    write_json(
        &algo_dir.join("summary.json"),
        &TrainSummary {
            algo: algo.name(),
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            runs: &runs,
        },
    )?;
    Ok((algo_dir, runs))
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct OracleEntry {
    pub resolution: usize,
    pub safe_cells: usize,
    pub reach_avoid_cells: usize,
    pub sweeps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Refinement {
    pub coarse: usize,
    pub fine: usize,
    /// Coarse cell centers whose classification differs on the fine grid.
    pub disagreeing_cells: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub params_hash: String,
    pub grids: Vec<OracleEntry>,
    pub refinement: Vec<Refinement>,
}

/// Safe set and reach-avoid set at each of `config.oracle_resolutions`,
/// plus a disagreement count between consecutive grids.
pub fn cmd_oracle(config: &RunConfig, output: Option<&Path>) -> CliResult<PathBuf> {
    let dir = config.output_root(output).join("oracle");
    create_dir(&dir)?;
    write_config(&dir, config)?;
    let seeds = experiment::axiom_states(config);
    let mut grids = Vec::new();
    let mut refinement = Vec::new();
    let mut previous: Option<oracle::PendulumOracle> = None;
    for &res in &config.oracle_resolutions {
        let o = grid_oracle_pendulum(config.env, res)?;
        let ra: SafeSetMask = o.reach_avoid_set(&seeds);
        write_mask(&dir, &format!("safe_{res}"), "safe", &o.safe, o.spec(), &config.env)?;
        write_mask(&dir, &format!("reach_avoid_{res}"), "reach_avoid", &ra, o.spec(), &config.env)?;
        grids.push(OracleEntry {
            resolution: res,
            safe_cells: o.safe.count(),
            reach_avoid_cells: ra.count(),
            sweeps: o.sweeps,
        });
        if let Some(coarse) = &previous {
            let fraction = oracle::refinement_disagreement(coarse, &o);
            refinement.push(Refinement {
                coarse: coarse.spec().theta_cells,
                fine: res,
                disagreeing_cells: (fraction * coarse.spec().num_cells() as f64).round() as usize,
                fraction,
            });
        }
        previous = Some(o);
    }
    write_json(
        &dir.join("oracle.json"),
        &OracleSummary {
            params_hash: oracle::params_hash(&config.env),
            grids,
            refinement,
        },
    )?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// atlas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AtlasSummary {
    pub seed: u64,
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub reports: Vec<InstanceReport>,
}

/// Certifies every fixed point of `config.atlas.instances` random MDPs.
/// With `corrupt_verifier` the candidate set of each fixed point is replaced
/// by the whole state space, which the checks must reject.
pub fn cmd_atlas(config: &RunConfig, output: Option<&Path>, corrupt_verifier: bool) -> CliResult<PathBuf> {
    let dir = config.output_root(output).join("atlas");
    create_dir(&dir)?;
    write_config(&dir, config)?;
    let a = &config.atlas;
    let mdps = atlas::random_instances(a.seed, a.instances, a.max_states, a.max_actions, a.density);
    let reports: Vec<InstanceReport> = mdps
        .iter()
        .enumerate()
        .map(|(i, mdp)| {
            if corrupt_verifier {
                atlas::certify_instance_with(i, mdp, |b| {
                    SafeSetMask::from_states(vec![true; b.num_states()], b.num_actions())
                })
            } else {
                atlas::certify_instance(i, mdp)
            }
        })
        .collect();
    let skipped = reports.iter().filter(|r| r.skipped.is_some()).count();
    let failed: Vec<usize> = reports.iter().filter(|r| !r.passed()).map(|r| r.index).collect();
    let summary = AtlasSummary {
        seed: a.seed,
        instances: reports.len(),
        passed: reports.len() - failed.len() - skipped,
        failed: failed.len(),
        skipped,
        reports,
    };
    write_json(&dir.join("atlas.json"), &summary)?;
    if !failed.is_empty() {
        return Err(CliError::TheoremViolation(format!(
            "{} of {} instances failed certification (first: {:?}); see {}",
            failed.len(),
            summary.instances,
            &failed[..failed.len().min(5)],
            dir.join("atlas.json").display()
        )));
    }
    Ok(dir)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Rejects a checkpoint whose network cannot have come from `config`,
/// naming the configuration field that disagrees.
pub fn check_checkpoint(ckpt: &Checkpoint, config: &RunConfig) -> CliResult<()> {
    let net: &Mlp = &ckpt.net;
    let (hidden, activation, key) = match ckpt.algo.as_str() {
        "b2e" => (&config.b2e.hidden, OutputActivation::Sigmoid, "b2e.hidden"),
        "sbe" => (&config.sbe.hidden, OutputActivation::Identity, "sbe.hidden"),
        other => {
            return Err(CliError::Config(format!(
                "algo: checkpoint algorithm `{other}` is neither b2e nor sbe"
            )))
        }
    };
    if net.output_activation() != activation {
        return Err(CliError::Config(format!(
            "algo: checkpoint output activation {:?} does not match algorithm {}",
            net.output_activation(),
            ckpt.algo
        )));
    }
    if net.input_dim() != OBSERVATION_DIM {
        return Err(CliError::Config(format!(
            "observation dimension: checkpoint expects {}, environment provides {OBSERVATION_DIM}",
            net.input_dim()
        )));
    }
    if net.output_dim() != config.env.torque_levels {
        return Err(CliError::Config(format!(
            "env.torque_levels: checkpoint has {} action outputs, config has {}",
            net.output_dim(),
            config.env.torque_levels
        )));
    }
    let sizes = net.sizes();
    let ckpt_hidden = &sizes[1..sizes.len() - 1];
    if ckpt_hidden != hidden.as_slice() {
        return Err(CliError::Config(format!(
            "{key}: checkpoint has hidden layers {ckpt_hidden:?}, config has {hidden:?}"
        )));
    }
    Ok(())
}

/// Evaluates a saved critic. Writes the report next to the checkpoint in
/// `eval/` unless `output` is given.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, output: Option<&Path>) -> CliResult<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_checkpoint(&ckpt, config)?;
    let dir = match output {
        Some(dir) => dir.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval"),
    };
    create_dir(&dir)?;
    write_config(&dir, config)?;
    let setup = Setup::new(config)?;
    let evaluated = match ckpt.algo.as_str() {
        "b2e" => vec![experiment::evaluate_b2e(&setup, config, &NeuralCritic { net: ckpt.net }, ckpt.seed)?],
        _ => experiment::evaluate_sbe(&setup, config, &SbeCritic { net: ckpt.net }, ckpt.seed)?,
    };
    let report = EvalReport::new(&ckpt.algo, ckpt.seed, &run_id(config, ckpt.seed), &config.hash());
    finish_report(&setup, &dir, report, evaluated, Vec::new())?;
    Ok(dir)
}
