//! Mixed-type tabular imputation with correlation-prior feature attention.

pub mod baselines;
pub mod benchmark;
pub mod cpfa;
pub mod dependency;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod missingness;
pub mod nn;
pub mod prior;
pub mod synth;
pub mod table;

pub use error::{Error, Result};
