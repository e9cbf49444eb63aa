//! Experiment harness for the EnGSF benchmarks: configuration parsing,
//! seeded twin experiments, CSV outputs and plot tables.

pub mod config;
pub mod error;
pub mod plot;
pub mod run;
pub mod simulate;

pub use config::{parse_config, ConfigError, Experiment, ExperimentConfig, FilterKind, ModelKind};
pub use error::HarnessError;
pub use plot::{emit_plot_data, emit_sweep_plot_data};
pub use run::{run_experiment, run_sweep, simulate_all, RunManifest, SweepManifest};
pub use simulate::{simulate_seed, static_oracle, SeedRun};
