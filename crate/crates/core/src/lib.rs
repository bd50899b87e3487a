//! Binary safety critics for deterministic MDPs with an avoid set.
//!
//! A binary critic `b(s, a)` is 1 when taking `a` at `s` leads to the failure
//! set under every continuation and 0 otherwise. It satisfies the undiscounted
//! recursion
//!
//! ```text
//! b(s, a) = i(s) + (1 - i(s)) * min_a' b(F(s, a), a')
//! ```
//!
//! whose operator is monotone but not a contraction. The crate provides:
//!
//! - [`env`]: finite MDPs and the discrete-torque inverted pendulum,
//! - [`oracle`]: exact least fixed points by monotone iteration, policy values
//!   and a grid-discretized ground truth for the pendulum,
//! - [`atlas`]: exhaustive fixed-point enumeration and certification on small MDPs,
//! - [`neural`]: a small MLP with sigmoid heads, BCE loss and Adam,
//! - [`b2e`]: the self-consistency trainer driven by axiomatic safe data,
//! - [`sbe`]: the discounted safety Bellman baseline,
//! - [`eval`]: safety rate, policy entropy, false-safe rate and figure data.

pub mod atlas;
pub mod b2e;
pub mod env;
pub mod eval;
pub mod neural;
pub mod oracle;
pub mod rng;
pub mod sbe;

mod error;

pub use error::{Error, Result};
