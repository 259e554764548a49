//! Configuration, orchestration and artifact writing for the `pilltop` binary.

pub mod config;
pub mod run;
pub mod target;

pub use config::{load_config, parse_config, ConfigErrors, Mode, RunConfig};
pub use run::{execute, prepare, RunError, RunSummary};
pub use target::{load_target, TargetProfile};
