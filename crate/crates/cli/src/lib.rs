//! Command-line plumbing for NLQ4Rec: run configuration and experiment
//! orchestration shared by the `nlq4rec` binary and the acceptance suite.

pub mod experiment;
pub mod run_config;

pub use experiment::{run, sweep, RunOutcome, SeedOutcome, SweepParam};
pub use run_config::{Precision, RunConfig};
