//! Configuration, multi-seed runs, and the standalone numerical checks.

pub mod checks;
pub mod config;
pub mod runner;
pub mod stats;

pub use config::{load, DatasetSpec, ExperimentConfig, RawConfig};
pub use runner::{run, run_in_memory, RunReport, SeedOutcome};
