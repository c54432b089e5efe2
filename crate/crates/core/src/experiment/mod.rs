//! Configuration-driven experiments and their log files.

pub mod config;
pub mod log;
pub mod runner;
pub mod summary;

pub use config::{load_config, load_config_over, parse_config, ExperimentConfig, Preset};
pub use runner::{run_experiment, simulate, RunOutcome};
pub use summary::summarize;
