//! Small-area estimation of household displacement rates.
//!
//! The crate covers the full pipeline: ingesting survey records and census
//! poststratification counts, building area adjacency structure, fitting a
//! family of Bayesian logistic models by MCMC, poststratifying posterior
//! draws to area-level rates, benchmarking them against design-based
//! regional estimates, and validating the models by leaving areas out.

pub mod benchmark;
pub mod cell;
pub mod error;
pub mod exec;
pub mod graph;
pub mod inference;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod poststrat;
pub mod rng;
pub mod stats;
pub mod validate;

pub use error::{Error, Result};
