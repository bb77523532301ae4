//! Experiment runner for the localist attention toolkit.
//!
//! A run reads an [`spec::ExperimentSpec`], executes one scenario and writes
//! its artifacts to a directory. Every scenario returns an
//! [`artifacts::Outcome`] of named checks, metrics and files.

pub mod artifacts;
pub mod cli;
pub mod error;
pub mod report;
pub mod scenarios;
pub mod spec;

pub use artifacts::{Check, Outcome};
pub use error::CliError;
pub use spec::{ExperimentSpec, Scenario};
