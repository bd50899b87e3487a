//! Inverted pendulum with a discretized torque set.
//!
//! `theta` is measured from upright. The failure set is `|theta| >= angle_limit`
//! (falling past the horizontal by default). Dynamics use semi-implicit Euler:
//!
//! ```text
//! omega' = clamp(omega + (3g/(2l) sin(theta) + 3/(m l^2) u) dt, -omega_max, omega_max)
//! theta' = wrap(theta + omega' dt)
//! ```

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::DeterministicMdp;
use crate::{Error, Result};

/// Dimension of the network input `(cos theta, sin theta, omega)`.
pub const OBSERVATION_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub torque_levels: usize,
    pub angle_limit: f64,
    pub max_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            torque_levels: 5,
            angle_limit: FRAC_PI_2,
            max_speed: 8.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gravity", self.gravity),
            ("mass", self.mass),
            ("length", self.length),
            ("dt", self.dt),
            ("max_speed", self.max_speed),
            ("angle_limit", self.angle_limit),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("env.{name} must be positive, got {value}")));
            }
        }
        if !(self.max_torque.is_finite() && self.max_torque >= 0.0) {
            return Err(Error::Config("env.max_torque must be nonnegative".into()));
        }
        if self.torque_levels < 2 {
            return Err(Error::Config("env.torque_levels must be at least 2".into()));
        }
        Ok(())
    }

    /// Torque applied by action `index`; levels are equally spaced on
    /// `[-max_torque, max_torque]`.
    pub fn torque(&self, index: usize) -> f64 {
        debug_assert!(index < self.torque_levels);
        let span = 2.0 * self.max_torque / (self.torque_levels - 1) as f64;
        -self.max_torque + span * index as f64
    }

    /// Index of the zero-torque action, if the level set contains one.
    pub fn zero_torque_action(&self) -> Option<usize> {
        (0..self.torque_levels).find(|&k| self.torque(k).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

impl PendulumState {
    pub fn new(theta: f64, omega: f64) -> Self {
        Self { theta, omega }
    }

    pub fn observation(&self) -> [f64; OBSERVATION_DIM] {
        [self.theta.cos(), self.theta.sin(), self.omega]
    }
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn pendulum_step(&self, state: PendulumState, action: usize) -> PendulumState {
        let p = &self.params;
        let u = p.torque(action);
        let accel = 3.0 * p.gravity / (2.0 * p.length) * state.theta.sin()
            + 3.0 / (p.mass * p.length * p.length) * u;
        let omega = (state.omega + accel * p.dt).clamp(-p.max_speed, p.max_speed);
        let theta = wrap_angle(state.theta + omega * p.dt);
        PendulumState { theta, omega }
    }

    pub fn is_failure(&self, state: &PendulumState) -> bool {
        state.theta.abs() >= self.params.angle_limit
    }

    /// Signed distance to the failure set, `angle_limit - |theta|`.
    pub fn signed_distance(&self, state: &PendulumState) -> f64 {
        self.params.angle_limit - state.theta.abs()
    }
}

impl DeterministicMdp for Pendulum {
    type State = PendulumState;

    fn num_actions(&self) -> usize {
        self.params.torque_levels
    }

    fn step(&self, state: &PendulumState, action: usize) -> PendulumState {
        self.pendulum_step(*state, action)
    }

    fn insecurity(&self, state: &PendulumState) -> bool {
        self.is_failure(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Pendulum {
        Pendulum::default()
    }

    #[test]
    fn default_torques_are_equally_spaced() {
        let p = PendulumParams::default();
        let torques: Vec<f64> = (0..5).map(|k| p.torque(k)).collect();
        assert_eq!(torques, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(p.zero_torque_action(), Some(2));
    }

    #[test]
    fn upright_rest_is_fixed_under_zero_torque() {
        let next = env().pendulum_step(PendulumState::new(0.0, 0.0), 2);
        assert_eq!(next, PendulumState::new(0.0, 0.0));
    }

    #[test]
    fn positive_torque_pushes_positive() {
        let next = env().pendulum_step(PendulumState::new(0.0, 0.0), 4);
        assert!(next.omega > 0.0 && next.theta > 0.0);
    }

    #[test]
    fn hand_evaluated_step() {
        // omega' = 0.5 + (15 sin 0.1 - 6) * 0.05, theta' = 0.1 + omega' * 0.05
        let next = env().pendulum_step(PendulumState::new(0.1, 0.5), 0);
        assert!((next.omega - 0.274_875_062_485).abs() < 1e-9, "{next:?}");
        assert!((next.theta - 0.113_743_753_124).abs() < 1e-9, "{next:?}");
    }

    #[test]
    fn failure_boundary_is_closed() {
        let e = env();
        assert!(!e.is_failure(&PendulumState::new(0.0, 0.0)));
        assert!(e.is_failure(&PendulumState::new(FRAC_PI_2, 0.0)));
        assert!(e.is_failure(&PendulumState::new(-1.6, 3.0)));
        assert!(e.is_failure(&PendulumState::new(-1.6, -7.0)));
        assert!(e.signed_distance(&PendulumState::new(FRAC_PI_2, 0.0)) <= 0.0);
    }

    #[test]
    fn wrap_and_clamp_hold() {
        let e = env();
        let next = e.pendulum_step(PendulumState::new(3.1, 7.9), 4);
        assert!((-PI..=PI).contains(&next.theta));
        assert!(next.omega.abs() <= e.params.max_speed);
        assert!((wrap_angle(3.0 * PI) - (-PI)).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = PendulumParams::default();
        p.dt = 0.0;
        assert!(Pendulum::new(p).is_err());
        let mut p = PendulumParams::default();
        p.torque_levels = 1;
        assert!(Pendulum::new(p).is_err());
    }
}
