//! Configuration-driven runs, comparisons and the acceptance suite.

pub mod config;
pub mod run;
pub mod verify;

pub use config::{parse_config, Algorithm, Experiment, Plan, RunConfig};
pub use run::{bound_only, compare, execute, CompareReport, RunOutput, Summary, THRESHOLDS};
pub use verify::{run_criterion, run_suite, CriterionReport, Suite};
