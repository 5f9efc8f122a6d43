//! Asynchronous push-pull stochastic average gradient (APP-SAG) for
//! distributed policy evaluation over directed networks.
//!
//! The crate has three layers:
//!
//! * the problem: [`mdp`] builds sampled data and [`mspbe`] turns it into the
//!   per-sample saddle functions J_{i,p};
//! * the algorithm: [`protocol`] is the per-node state machine and
//!   [`simulator`] drives it under asynchronous schedules and delays;
//! * the analysis: [`augmented`] rebuilds every run as a matrix recursion over
//!   the delay-augmented graph, and [`baselines`] provides centralized oracles.

pub mod error;
pub mod augmented;
pub mod baselines;
pub mod graph;
pub mod logscale;
pub mod mdp;
pub mod mspbe;
pub mod protocol;
pub mod rng;
pub mod setup;
pub mod simulator;

pub use error::{Error, Result};
