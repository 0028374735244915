//! Inverse reinforcement learning on a highway driving simulator.
//!
//! The crate bundles the pieces of the pipeline:
//!
//! * [`sim`]: a deterministic 2D highway with single-track ego kinematics,
//!   slow obstacle cars, walls and 13 ray-cast range sensors.
//! * [`features`]: 208-dimensional one-hot-per-sensor features, linear
//!   rewards and discounted feature expectations.
//! * [`dqn`]: a small fully connected Q-network trained with experience
//!   replay and a periodically refreshed target network.
//! * [`irl`]: the projection-based apprenticeship-learning loop, generic
//!   over the RL solver.
//! * [`toy`]: exact tabular solvers used as oracles.
//! * [`expert`], [`eval`], [`persist`], [`commands`], [`server`]: demo
//!   generation, evaluation, file formats and entry points.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod dqn;
pub mod env;
pub mod error;
pub mod eval;
pub mod expert;
pub mod features;
pub mod irl;
pub mod persist;
pub mod rng;
pub mod server;
pub mod sim;
pub mod toy;

pub use error::{Error, Result};
