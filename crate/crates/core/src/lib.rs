//! Local-credit amortized inference for sparse binary graphical models.
//!
//! A Bayesian-network sampler `q_θ` over ±1 variables is trained so that the
//! log-ratio of `q` under a single-variable flip matches the log-ratio of the
//! target density, which only involves the factors touching that variable.

pub mod energy;
pub mod error;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod math;
pub mod nn;
pub mod sampler;

pub use error::{Error, Result};
