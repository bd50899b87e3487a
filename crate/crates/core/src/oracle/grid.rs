//! Grid-discretized ground truth for the pendulum.
//!
//! The box `[-pi, pi] x [-omega_max, omega_max]` is split into equal cells.
//! Each cell steps its center through the continuous dynamics and snaps the
//! successor to the containing cell, which yields an ordinary [`FiniteMdp`];
//! every finite-MDP result in [`super`] applies to it unchanged. A cell is
//! insecure when it intersects the failure set.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{kleene, TabularCritic};
use crate::env::{FiniteMdp, Pendulum, PendulumParams, PendulumState};
use crate::{Error, Result};

pub const MIN_RESOLUTION: usize = 51;
pub const MASK_SCHEMA_VERSION: u32 = 1;

/// Uniform cell layout over the pendulum state box. Cell index is
/// `theta_index * omega_cells + omega_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub theta_cells: usize,
    pub omega_cells: usize,
    pub theta_bounds: [f64; 2],
    pub omega_bounds: [f64; 2],
}

impl GridSpec {
    pub fn square(params: &PendulumParams, resolution: usize) -> Self {
        Self {
            theta_cells: resolution,
            omega_cells: resolution,
            theta_bounds: [-PI, PI],
            omega_bounds: [-params.max_speed, params.max_speed],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.theta_cells * self.omega_cells
    }

    pub fn theta_width(&self) -> f64 {
        (self.theta_bounds[1] - self.theta_bounds[0]) / self.theta_cells as f64
    }

    pub fn omega_width(&self) -> f64 {
        (self.omega_bounds[1] - self.omega_bounds[0]) / self.omega_cells as f64
    }

    pub fn index(&self, theta_index: usize, omega_index: usize) -> usize {
        theta_index * self.omega_cells + omega_index
    }

    pub fn split(&self, cell: usize) -> (usize, usize) {
        (cell / self.omega_cells, cell % self.omega_cells)
    }

    fn axis_index(value: f64, lo: f64, width: f64, cells: usize) -> usize {
        let raw = ((value - lo) / width).floor();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(cells - 1)
        }
    }

    /// Cell containing `state`; states outside the box snap to the nearest
    /// boundary cell.
    pub fn cell_of(&self, state: &PendulumState) -> usize {
        let ti = Self::axis_index(
            state.theta,
            self.theta_bounds[0],
            self.theta_width(),
            self.theta_cells,
        );
        let wi = Self::axis_index(
            state.omega,
            self.omega_bounds[0],
            self.omega_width(),
            self.omega_cells,
        );
        self.index(ti, wi)
    }

    pub fn center(&self, cell: usize) -> PendulumState {
        let (ti, wi) = self.split(cell);
        PendulumState::new(
            self.theta_bounds[0] + (ti as f64 + 0.5) * self.theta_width(),
            self.omega_bounds[0] + (wi as f64 + 0.5) * self.omega_width(),
        )
    }

    /// `([theta_lo, theta_hi], [omega_lo, omega_hi])` of a cell.
    pub fn bounds(&self, cell: usize) -> ([f64; 2], [f64; 2]) {
        let (ti, wi) = self.split(cell);
        let t0 = self.theta_bounds[0] + ti as f64 * self.theta_width();
        let w0 = self.omega_bounds[0] + wi as f64 * self.omega_width();
        (
            [t0, t0 + self.theta_width()],
            [w0, w0 + self.omega_width()],
        )
    }

    pub fn centers(&self) -> impl Iterator<Item = PendulumState> + '_ {
        (0..self.num_cells()).map(|c| self.center(c))
    }
}

/// The finite MDP induced by a [`GridSpec`] on the pendulum.
#[derive(Debug, Clone)]
pub struct GridMdp {
    pub spec: GridSpec,
    pub params: PendulumParams,
    pub mdp: FiniteMdp,
}

impl GridMdp {
    pub fn build(params: PendulumParams, spec: GridSpec) -> Result<Self> {
        let env = Pendulum::new(params)?;
        let m = params.torque_levels;
        let n = spec.num_cells();
        let mut successors = Vec::with_capacity(n * m);
        let mut insecure = Vec::with_capacity(n);
        for cell in 0..n {
            let center = spec.center(cell);
            for a in 0..m {
                successors.push(spec.cell_of(&env.pendulum_step(center, a)));
            }
            let ([lo, hi], _) = spec.bounds(cell);
            insecure.push(lo.abs().max(hi.abs()) >= params.angle_limit);
        }
        let mdp = FiniteMdp::new(n, m, successors, insecure)?;
        Ok(Self { spec, params, mdp })
    }
}

/// Per-state membership in a candidate safe region, with optional per-action
/// detail. When action bits are present a state is in the set iff at least
/// one of its actions is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeSetMask {
    num_actions: usize,
    states: Vec<bool>,
    actions: Option<Vec<bool>>,
}

impl SafeSetMask {
    pub fn from_states(states: Vec<bool>, num_actions: usize) -> Self {
        Self {
            num_actions,
            states,
            actions: None,
        }
    }

    /// Row-major per-action bits; state bits are derived.
    pub fn from_actions(num_actions: usize, actions: Vec<bool>) -> Self {
        assert!(num_actions > 0 && actions.len().is_multiple_of(num_actions));
        let states = actions
            .chunks(num_actions)
            .map(|row| row.iter().any(|&b| b))
            .collect();
        Self {
            num_actions,
            states,
            actions: Some(actions),
        }
    }

    /// `C = { s : min_a b(s, a) = 0 }` with per-action bits `b(s, a) = 0`.
    pub fn from_critic(b: &TabularCritic) -> Self {
        Self::from_actions(b.num_actions(), b.bits().iter().map(|&u| !u).collect())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn contains(&self, state: usize) -> bool {
        self.states[state]
    }

    pub fn action_safe(&self, state: usize, action: usize) -> Option<bool> {
        self.actions
            .as_ref()
            .map(|bits| bits[state * self.num_actions + action])
    }

    pub fn states(&self) -> &[bool] {
        &self.states
    }

    pub fn actions(&self) -> Option<&[bool]> {
        self.actions.as_deref()
    }

    pub fn count(&self) -> usize {
        self.states.iter().filter(|&&b| b).count()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.states
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn is_subset_of(&self, other: &SafeSetMask) -> bool {
        self.states.len() == other.states.len()
            && self.states.iter().zip(&other.states).all(|(&a, &b)| !a || b)
    }

    /// CSV raster: `theta_index,omega_index,action_0..action_{m-1},safe`.
    /// Action columns are empty when the mask carries no per-action bits.
    pub fn to_csv(&self, spec: &GridSpec) -> String {
        assert_eq!(self.states.len(), spec.num_cells());
        let mut out = String::from("theta_index,omega_index");
        for a in 0..self.num_actions {
            let _ = write!(out, ",action_{a}");
        }
        out.push_str(",safe\n");
        for cell in 0..self.states.len() {
            let (ti, wi) = spec.split(cell);
            let _ = write!(out, "{ti},{wi}");
            for a in 0..self.num_actions {
                match self.action_safe(cell, a) {
                    Some(bit) => {
                        let _ = write!(out, ",{}", u8::from(bit));
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{}", u8::from(self.states[cell]));
        }
        out
    }
}

/// Compact JSON header written next to a mask raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeader {
    pub schema_version: u32,
    pub kind: String,
    pub resolution: [usize; 2],
    pub theta_bounds: [f64; 2],
    pub omega_bounds: [f64; 2],
    pub num_actions: usize,
    pub safe_cells: usize,
    pub params: PendulumParams,
    pub params_hash: String,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn params_hash(params: &PendulumParams) -> String {
    sha256_hex(&serde_json::to_string(params).expect("params serialize"))
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_mask(
    dir: &Path,
    stem: &str,
    kind: &str,
    mask: &SafeSetMask,
    spec: &GridSpec,
    params: &PendulumParams,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, mask.to_csv(spec)).map_err(|e| Error::io(&csv_path, e))?;
    let header = MaskHeader {
        schema_version: MASK_SCHEMA_VERSION,
        kind: kind.to_string(),
        resolution: [spec.theta_cells, spec.omega_cells],
        theta_bounds: spec.theta_bounds,
        omega_bounds: spec.omega_bounds,
        num_actions: mask.num_actions(),
        safe_cells: mask.count(),
        params: *params,
        params_hash: params_hash(params),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Least fixed point of the binary operator on a pendulum grid, with the
/// induced safe set.
#[derive(Debug, Clone)]
pub struct PendulumOracle {
    pub grid: GridMdp,
    pub b_star: TabularCritic,
    pub safe: SafeSetMask,
    pub sweeps: usize,
}

pub fn grid_oracle_pendulum(params: PendulumParams, resolution: usize) -> Result<PendulumOracle> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "oracle resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let grid = GridMdp::build(params, GridSpec::square(&params, resolution))?;
    let run = kleene(&grid.mdp, |_| {});
    let safe = SafeSetMask::from_critic(&run.b_star);
    Ok(PendulumOracle {
        grid,
        b_star: run.b_star,
        safe,
        sweeps: run.sweeps,
    })
}

impl PendulumOracle {
    pub fn spec(&self) -> &GridSpec {
        &self.grid.spec
    }

    pub fn is_safe(&self, state: &PendulumState) -> bool {
        self.safe.contains(self.grid.spec.cell_of(state))
    }

    pub fn is_safe_action(&self, state: &PendulumState, action: usize) -> bool {
        !self.b_star.get(self.grid.spec.cell_of(state), action)
    }

    /// Forward closure of `initial` under the actions with `b*(s, a) = 0`,
    /// intersected with the safe set.
    pub fn reach_avoid_set(&self, initial: &[PendulumState]) -> SafeSetMask {
        let cells: Vec<usize> = initial.iter().map(|s| self.grid.spec.cell_of(s)).collect();
        self.reach_avoid_cells(&cells)
    }

    pub fn reach_avoid_cells(&self, initial: &[usize]) -> SafeSetMask {
        let mdp = &self.grid.mdp;
        let mut reached = vec![false; mdp.num_states()];
        let mut queue = VecDeque::new();
        for &c in initial {
            if self.safe.contains(c) && !reached[c] {
                reached[c] = true;
                queue.push_back(c);
            }
        }
        while let Some(s) = queue.pop_front() {
            for a in 0..mdp.num_actions() {
                if self.b_star.get(s, a) {
                    continue;
                }
                let next = mdp.successor(s, a);
                if self.safe.contains(next) && !reached[next] {
                    reached[next] = true;
                    queue.push_back(next);
                }
            }
        }
        SafeSetMask::from_states(reached, mdp.num_actions())
    }

    /// Safe cells whose centers lie in `|theta| <= theta_max`, `|omega| <= omega_max`.
    pub fn safe_cells_in_box(&self, theta_max: f64, omega_max: f64) -> Vec<usize> {
        self.safe
            .members()
            .filter(|&c| {
                let s = self.grid.spec.center(c);
                s.theta.abs() <= theta_max && s.omega.abs() <= omega_max
            })
            .collect()
    }
}

/// Fraction of `coarse` cell centers whose safe/unsafe classification
/// differs in `fine`.
pub fn refinement_disagreement(coarse: &PendulumOracle, fine: &PendulumOracle) -> f64 {
    let spec = coarse.spec();
    let flips = (0..spec.num_cells())
        .filter(|&c| coarse.safe.contains(c) != fine.is_safe(&spec.center(c)))
        .count();
    flips as f64 / spec.num_cells() as f64
}
