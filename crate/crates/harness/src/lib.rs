//! Experiment grid, summaries and certification for the reward-transfer
//! library.

pub mod certify;
pub mod config;
pub mod error;
pub mod grid;
pub mod seeds;
pub mod summary;

pub use config::{ExperimentConfig, Profile};
pub use error::{HarnessError, Result};
