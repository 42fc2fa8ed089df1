//! Experiment harness: corpora, training, evaluation and metric CSVs for
//! the GMM and DMM samplers in `apg-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod train;

pub use error::{HarnessError, Result};
