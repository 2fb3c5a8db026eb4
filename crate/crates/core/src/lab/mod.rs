//! Experiment harness: configs, runs, gradient-field dumps and ablations.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod gradfield;

pub use config::ExperimentConfig;
pub use experiment::{run, InitCache, ModeAssignment, RunReport};
