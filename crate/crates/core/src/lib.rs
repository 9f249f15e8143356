//! Function-space Bayesian pseudocoresets for small classifiers.

pub mod array_io;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fbpc;
pub mod models;
pub mod oracle;
pub mod posteriors;
pub mod rng;
pub mod sghmc;

pub use error::{FbpcError, Result};
