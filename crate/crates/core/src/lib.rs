//! Numerical laboratory for limit theorems of skew products driven by a
//! finite-state mixing Markov chain with piecewise-linear Markov fiber maps.

pub mod annealed;
pub mod config;
pub mod driving;
pub mod error;
pub mod experiment;
pub mod fibers;
pub mod fields;
pub mod martingale;
pub mod montecarlo;
pub mod operators;
pub mod stats;

pub use error::{LabError, Result};
