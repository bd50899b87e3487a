//! Run configuration: one TOML file, `key=value` overrides, embedded defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use safecritic::b2e::TrainConfig;
use safecritic::env::PendulumParams;
use safecritic::oracle::grid::MIN_RESOLUTION;
use safecritic::sbe::SbeConfig;

use crate::CliError;

pub const OUTPUT_ENV: &str = "SAFECRITIC_OUTPUT";
pub const DEFAULT_OUTPUT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    B2e,
    Sbe,
    Oracle,
    Atlas,
    Eval,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::B2e => "b2e",
            Algorithm::Sbe => "sbe",
            Algorithm::Oracle => "oracle",
            Algorithm::Atlas => "atlas",
            Algorithm::Eval => "eval",
        }
    }
}

/// Support of the initial-state distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRegion {
    /// Every oracle-safe cell center.
    OracleSafe,
    /// Oracle-safe cell centers inside `|theta| <= box_theta`, `|omega| <= box_omega`.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub region: StartRegion,
    pub box_theta: f64,
    pub box_omega: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            region: StartRegion::Box,
            box_theta: 1.0,
            box_omega: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizon: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasConfig {
    pub seed: u64,
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub density: f64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            max_states: 6,
            max_actions: 3,
            density: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Oracle grid cells per axis used for starts, evaluation and rasters.
    pub resolution: usize,
    /// Grids computed by the `oracle` command; consecutive pairs are compared.
    pub oracle_resolutions: Vec<usize>,
    /// SBE thresholds in h-units (radians).
    pub etas: Vec<f64>,
    /// Stop training with exit code 3 when a round ends inconsistent.
    pub abort_on_inconsistent: bool,
    pub initial: InitialConfig,
    pub eval: EvalConfig,
    pub env: PendulumParams,
    pub b2e: TrainConfig,
    pub sbe: SbeConfig,
    pub atlas: AtlasConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::B2e,
            seeds: vec![0],
            output_dir: None,
            resolution: 201,
            oracle_resolutions: vec![201, 401],
            etas: vec![-0.1, 0.0, 0.05, 0.1, 0.2],
            abort_on_inconsistent: false,
            initial: InitialConfig::default(),
            eval: EvalConfig::default(),
            env: PendulumParams::default(),
            b2e: TrainConfig::default(),
            sbe: SbeConfig::default(),
            atlas: AtlasConfig::default(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Defaults, then `file` if given, then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_error(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: safecritic::Error| config_error(e.to_string());
        self.env.validate().map_err(wrap)?;
        self.b2e.validate().map_err(wrap)?;
        self.sbe.validate().map_err(wrap)?;
        if self.seeds.is_empty() {
            return Err(config_error("seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(config_error("seeds must be distinct"));
        }
        for (key, res) in std::iter::once(("resolution", &self.resolution))
            .chain(self.oracle_resolutions.iter().map(|r| ("oracle_resolutions", r)))
        {
            if *res < MIN_RESOLUTION {
                return Err(config_error(format!(
                    "{key}: resolution {res} is below the minimum {MIN_RESOLUTION}"
                )));
            }
        }
        if self.oracle_resolutions.is_empty() {
            return Err(config_error("oracle_resolutions must not be empty"));
        }
        if self.etas.is_empty() || self.etas.iter().any(|e| !e.is_finite()) {
            return Err(config_error("etas must be a nonempty list of finite numbers"));
        }
        if self.eval.episodes == 0 || self.eval.horizon == 0 {
            return Err(config_error("eval.episodes and eval.horizon must be positive"));
        }
        if !(self.initial.box_theta > 0.0 && self.initial.box_omega > 0.0) {
            return Err(config_error("initial.box_theta and initial.box_omega must be positive"));
        }
        let a = &self.atlas;
        if a.instances == 0 || a.max_states == 0 || a.max_actions == 0 {
            return Err(config_error("atlas.instances, max_states and max_actions must be positive"));
        }
        if !(0.0..=1.0).contains(&a.density) {
            return Err(config_error(format!("atlas.density must lie in [0, 1], got {}", a.density)));
        }
        Ok(())
    }

    /// Flag, then config file, then environment, then `runs`.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(dir) = flag {
            return dir.to_path_buf();
        }
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(DEFAULT_OUTPUT),
        }
    }

    pub fn hash(&self) -> String {
        safecritic::oracle::sha256_hex(&self.to_toml())
    }
}

/// Sets a dotted key. The value is read as a TOML literal, or as a bare
/// string when it does not parse.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("override `{item}` has an empty key segment")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = parts.split_last().expect("nonempty key");
    let mut node = table;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
