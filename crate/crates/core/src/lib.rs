//! Soft Bayesian additive regression trees with a sampler that can spread
//! the data over several workers while producing the same chain as a single
//! process.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod posterior;
pub mod priors;
pub mod problem;
pub mod runtime;
pub mod sampler;
pub mod stats;
#[doc(hidden)]
pub mod testing;
pub mod tree;
pub(crate) mod wire;

pub use error::{Result, SbartError};
