//! Simulation harness for conformal off-policy prediction: experiment
//! configuration, replicated runs, reports and preset figure grids.

pub mod config;
pub mod presets;
pub mod report;
pub mod runner;

pub use config::{BehaviorModel, ConfigError, ExperimentConfig, Method};
pub use report::{ExperimentReport, MethodSummary, ReplicateRecord};
pub use runner::{run_experiment, RunError};
