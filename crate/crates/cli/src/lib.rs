//! Config-driven runner for fits, predictions, simulations, cross-validation
//! and timing sweeps.

pub mod bench;
pub mod config;
pub mod rss;
pub mod run;

pub use bench::{bench_scaling, BenchOptions, BenchReport, BenchRun, RunStatus};
pub use config::{Command, ConfigErrors, Overrides, ResolvedRun, RunConfig};
pub use run::{run, SavedModel};
