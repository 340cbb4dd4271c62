//! Config-driven experiment runner.

pub mod config;
pub mod run;
pub mod summarize;

pub use config::{load_config, parse_config, ConfigError, Defaults, ExperimentConfig};
pub use run::{run, run_suite, RunError, RunManifest, RunOptions, SummaryRow};
pub use summarize::{render_table, summarize, Summary};
