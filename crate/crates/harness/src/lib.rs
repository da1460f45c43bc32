//! Experiment harness for `specrl`.
//!
//! - [`config`]: the JSON experiment configuration.
//! - [`scenarios`]: one runner per experiment scenario.
//! - [`verify`]: oracle checks run by `specrl verify`.
//! - [`stats`]: standard errors and the chi-square homogeneity test.
//! - [`output`]: metrics files.
//! - [`cli`]: the command-line front end.

pub mod cli;
pub mod config;
pub mod output;
pub mod scenarios;
pub mod stats;
pub mod verify;

pub use config::{ExperimentConfig, Scenario, ServerMode};
