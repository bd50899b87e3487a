//! Metrics for trained critics: safety rate, policy entropy over the
//! reach-avoid set, false-safe rate against the grid oracle, and the CSV/JSON
//! data behind the region and training-curve plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::b2e::{rollout, sample_action, uniform_safe_policy, InitialStates, NeuralCritic};
use crate::env::{Pendulum, PendulumState};
use crate::neural::hard_label;
use crate::oracle::{GridSpec, PendulumOracle, SafeSetMask};
use crate::rng::SeededRng;
use crate::sbe::{threshold_policy, SbeCritic};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A stochastic policy over the discrete torque levels.
pub trait ActionPolicy {
    fn probs(&self, state: &PendulumState) -> Vec<f64>;
}

/// Per-action safe/unsafe classification of states.
pub trait SafetyClassifier {
    fn num_actions(&self) -> usize;

    /// Row-major `states x actions`, `true` where the action is declared safe.
    fn safe_actions(&self, states: &[PendulumState]) -> Vec<bool>;
}

/// Uniform-safe policy of a binary critic.
pub struct B2ePolicy<'a>(pub &'a NeuralCritic);

impl ActionPolicy for B2ePolicy<'_> {
    fn probs(&self, state: &PendulumState) -> Vec<f64> {
        uniform_safe_policy(&self.0.values(state))
    }
}

impl SafetyClassifier for B2ePolicy<'_> {
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    fn safe_actions(&self, states: &[PendulumState]) -> Vec<bool> {
        self.0.values_batch(states).into_iter().map(|v| !hard_label(v)).collect()
    }
}

/// Threshold policy `q(s, a) >= eta` of the discounted critic.
pub struct SbePolicy<'a> {
    pub critic: &'a SbeCritic,
    pub eta: f64,
}

impl ActionPolicy for SbePolicy<'_> {
    fn probs(&self, state: &PendulumState) -> Vec<f64> {
        threshold_policy(&self.critic.values(state), self.eta)
    }
}

impl SafetyClassifier for SbePolicy<'_> {
    fn num_actions(&self) -> usize {
        self.critic.num_actions()
    }

    fn safe_actions(&self, states: &[PendulumState]) -> Vec<bool> {
        self.critic
            .values_batch(states)
            .into_iter()
            .map(|q| q >= self.eta)
            .collect()
    }
}

/// Uniform over the actions the grid oracle marks safe in the containing
/// cell; uniform over everything outside the safe set.
pub struct OraclePolicy<'a>(pub &'a PendulumOracle);

impl ActionPolicy for OraclePolicy<'_> {
    fn probs(&self, state: &PendulumState) -> Vec<f64> {
        let cell = self.0.spec().cell_of(state);
        let m = self.0.b_star.num_actions();
        let row = self.0.b_star.row(cell);
        let safe = row.iter().filter(|&&b| !b).count();
        if safe == 0 {
            return vec![1.0 / m as f64; m];
        }
        row.iter()
            .map(|&b| if b { 0.0 } else { 1.0 / safe as f64 })
            .collect()
    }
}

impl SafetyClassifier for OraclePolicy<'_> {
    fn num_actions(&self) -> usize {
        self.0.b_star.num_actions()
    }

    fn safe_actions(&self, states: &[PendulumState]) -> Vec<bool> {
        let m = self.num_actions();
        let mut out = Vec::with_capacity(states.len() * m);
        for s in states {
            let cell = self.0.spec().cell_of(s);
            out.extend(self.0.b_star.row(cell).iter().map(|&b| !b));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyRate {
    pub episodes: usize,
    pub failures: usize,
    pub rate: f64,
}

/// Fraction of `episodes` rollouts of `horizon` steps from `initial` that
/// never enter the failure set.
pub fn safety_rate(
    env: &Pendulum,
    policy: &dyn ActionPolicy,
    initial: &InitialStates,
    episodes: usize,
    horizon: usize,
    rng: &mut SeededRng,
) -> Result<SafetyRate> {
    if episodes == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let mut failures = 0;
    for _ in 0..episodes {
        let start = initial.sample(rng);
        let summary = rollout(
            env,
            start,
            horizon,
            |s| sample_action(&policy.probs(s), rng),
            |_| {},
        );
        failures += usize::from(summary.failed);
    }
    Ok(SafetyRate {
        episodes,
        failures,
        rate: (episodes - failures) as f64 / episodes as f64,
    })
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Mean policy entropy (nats) over `states`.
pub fn avg_entropy(policy: &dyn ActionPolicy, states: &[PendulumState]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Empty("reach-avoid set"));
    }
    let total: f64 = states.iter().map(|s| entropy(&policy.probs(s))).sum();
    Ok(total / states.len() as f64)
}

/// Cell centers of the oracle reach-avoid set grown from `seeds`.
pub fn reach_avoid_states(oracle: &PendulumOracle, seeds: &[PendulumState]) -> Vec<PendulumState> {
    let mask = oracle.reach_avoid_set(seeds);
    mask.members().map(|c| oracle.spec().center(c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalseSafe {
    /// Cells with at least one action declared safe.
    pub declared_safe: usize,
    /// Of those, cells outside the oracle safe set.
    pub false_safe: usize,
    pub rate: f64,
}

/// Over the oracle grid's cell centers: the fraction of cells declared safe
/// (some action safe) that the oracle marks unsafe. Zero when nothing is
/// declared safe.
pub fn false_safe_rate(classifier: &dyn SafetyClassifier, oracle: &PendulumOracle) -> FalseSafe {
    let raster = SafeRaster::compute(classifier, oracle.spec());
    false_safe_from_raster(&raster, &oracle.safe)
}

pub fn false_safe_from_raster(raster: &SafeRaster, oracle_safe: &SafeSetMask) -> FalseSafe {
    let mut declared = 0;
    let mut wrong = 0;
    for cell in 0..raster.num_cells() {
        if raster.state_safe(cell) {
            declared += 1;
            if !oracle_safe.contains(cell) {
                wrong += 1;
            }
        }
    }
    FalseSafe {
        declared_safe: declared,
        false_safe: wrong,
        rate: if declared == 0 {
            0.0
        } else {
            wrong as f64 / declared as f64
        },
    }
}

/// Per-action classification of every cell center of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeRaster {
    pub spec: GridSpec,
    pub num_actions: usize,
    /// Row-major `cells x actions`.
    pub safe: Vec<bool>,
}

impl SafeRaster {
    pub fn compute(classifier: &dyn SafetyClassifier, spec: &GridSpec) -> Self {
        let states: Vec<PendulumState> = spec.centers().collect();
        Self {
            spec: *spec,
            num_actions: classifier.num_actions(),
            safe: classifier.safe_actions(&states),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.spec.num_cells()
    }

    pub fn action_safe(&self, cell: usize, action: usize) -> bool {
        self.safe[cell * self.num_actions + action]
    }

    pub fn state_safe(&self, cell: usize) -> bool {
        (0..self.num_actions).any(|a| self.action_safe(cell, a))
    }

    /// CSV for one action: `theta_index,omega_index,theta,omega,safe,oracle_safe`.
    pub fn action_csv(&self, action: usize, oracle: &SafeSetMask) -> String {
        let mut out = String::from("theta_index,omega_index,theta,omega,safe,oracle_safe\n");
        for cell in 0..self.num_cells() {
            let (ti, wi) = self.spec.split(cell);
            let c = self.spec.center(cell);
            let oracle_safe = oracle.action_safe(cell, action).unwrap_or(oracle.contains(cell));
            let _ = writeln!(
                out,
                "{ti},{wi},{},{},{},{}",
                c.theta,
                c.omega,
                u8::from(self.action_safe(cell, action)),
                u8::from(oracle_safe)
            );
        }
        out
    }

    pub fn from_action_csvs(spec: &GridSpec, texts: &[String]) -> Result<Self> {
        let m = texts.len();
        let mut safe = vec![false; spec.num_cells() * m];
        for (a, text) in texts.iter().enumerate() {
            let mut rows = 0;
            for line in text.lines().skip(1) {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 6 {
                    return Err(Error::Parse(format!("raster row `{line}`")));
                }
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("raster field `{s}`")))
                };
                let cell = spec.index(parse(fields[0])?, parse(fields[1])?);
                safe[cell * m + a] = parse(fields[4])? == 1;
                rows += 1;
            }
            if rows != spec.num_cells() {
                return Err(Error::Dimension {
                    expected: spec.num_cells(),
                    got: rows,
                });
            }
        }
        Ok(Self {
            spec: *spec,
            num_actions: m,
            safe,
        })
    }
}

/// Metrics of one evaluated policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub label: String,
    /// SBE threshold, absent for the binary critic.
    pub eta: Option<f64>,
    pub safety: SafetyRate,
    pub avg_entropy: f64,
    pub false_safe: FalseSafe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub algo: String,
    pub seed: u64,
    pub run_id: String,
    pub config_hash: String,
    pub entropy_unit: String,
    pub policies: Vec<PolicyMetrics>,
    /// Cumulative failures after each training episode.
    pub cumulative_failures: Vec<usize>,
}

impl EvalReport {
    pub fn new(algo: &str, seed: u64, run_id: &str, config_hash: &str) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            algo: algo.to_string(),
            seed,
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            entropy_unit: "nats".to_string(),
            policies: Vec::new(),
            cumulative_failures: Vec::new(),
        }
    }
}

/// Everything behind the plots of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FiguresData {
    pub report: EvalReport,
    /// One raster per evaluated policy, same order as `report.policies`.
    pub rasters: Vec<SafeRaster>,
}

/// Per-episode curve CSV: `episode,failed,cumulative_failures`.
pub fn curve_csv(cumulative: &[usize]) -> String {
    let mut out = String::from("episode,failed,cumulative_failures\n");
    let mut prev = 0;
    for (e, &c) in cumulative.iter().enumerate() {
        let _ = writeln!(out, "{e},{},{c}", u8::from(c > prev));
        prev = c;
    }
    out
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .skip(1)
        .map(|line| {
            line.rsplit(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("curve row `{line}`")))
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn raster_path(dir: &Path, policy: usize, action: usize) -> PathBuf {
    dir.join(format!("raster_p{policy}_a{action}.csv"))
}

/// Writes `metrics.json`, `curve.csv` and `raster_p{policy}_a{action}.csv`
/// into `dir`. Returns the written paths.
pub fn export_figures_data(
    data: &FiguresData,
    oracle_safe: &SafeSetMask,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let metrics = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&data.report).map_err(|e| Error::json(&metrics, e))?;
    write(&metrics, &json)?;
    written.push(metrics);
    let curve = dir.join("curve.csv");
    write(&curve, &curve_csv(&data.report.cumulative_failures))?;
    written.push(curve);
    for (p, raster) in data.rasters.iter().enumerate() {
        for a in 0..raster.num_actions {
            let path = raster_path(dir, p, a);
            write(&path, &raster.action_csv(a, oracle_safe))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads back what [`export_figures_data`] wrote.
pub fn load_figures_data(dir: &Path, spec: &GridSpec, num_actions: usize) -> Result<FiguresData> {
    let metrics = dir.join("metrics.json");
    let report: EvalReport =
        serde_json::from_str(&read(&metrics)?).map_err(|e| Error::json(&metrics, e))?;
    let curve = parse_curve_csv(&read(&dir.join("curve.csv"))?)?;
    if curve != report.cumulative_failures {
        return Err(Error::Parse("curve.csv disagrees with metrics.json".into()));
    }
    let mut rasters = Vec::with_capacity(report.policies.len());
    for p in 0..report.policies.len() {
        let texts = (0..num_actions)
            .map(|a| read(&raster_path(dir, p, a)))
            .collect::<Result<Vec<_>>>()?;
        rasters.push(SafeRaster::from_action_csvs(spec, &texts)?);
    }
    Ok(FiguresData { report, rasters })
}

/// Mean and 95% normal confidence band of one curve point across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiPoint {
    pub mean: f64,
    pub stderr: f64,
    pub low: f64,
    pub high: f64,
}

/// `mean +- 1.96 * stderr` with the sample standard deviation (`n - 1`).
pub fn confidence_interval(values: &[f64]) -> Result<CiPoint> {
    if values.is_empty() {
        return Err(Error::Empty("confidence interval sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(CiPoint {
        mean,
        stderr,
        low: mean - 1.96 * stderr,
        high: mean + 1.96 * stderr,
    })
}

/// Pointwise band over equally long per-seed curves.
pub fn aggregate_curves(curves: &[Vec<usize>]) -> Result<Vec<CiPoint>> {
    let first = curves.first().ok_or(Error::Empty("curve set"))?;
    if let Some(bad) = curves.iter().find(|c| c.len() != first.len()) {
        return Err(Error::Dimension {
            expected: first.len(),
            got: bad.len(),
        });
    }
    (0..first.len())
        .map(|e| {
            let column: Vec<f64> = curves.iter().map(|c| c[e] as f64).collect();
            confidence_interval(&column)
        })
        .collect()
}

/// `episode,mean,stderr,ci_low,ci_high`.
pub fn aggregate_csv(points: &[CiPoint]) -> String {
    let mut out = String::from("episode,mean,stderr,ci_low,ci_high\n");
    for (e, p) in points.iter().enumerate() {
        let _ = writeln!(out, "{e},{},{},{},{}", p.mean, p.stderr, p.low, p.high);
    }
    out
}
