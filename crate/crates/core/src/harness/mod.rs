//! Experiment orchestration: config files, the three-phase pipeline, grid
//! search and artifact emission.

pub mod config;
pub mod csv_out;
pub mod grid;
pub mod pipeline;
pub mod plot;

pub use config::{ExperimentConfig, GridPoint, OneOrMany, RunConfig};
pub use csv_out::{emit_csv, emit_runs_csv, emit_selection_csv, read_metrics_csv, ParsedRun};
pub use grid::{grid_search, GridOutcome, Selection};
pub use pipeline::{build_federation, run_all, run_experiment, MetricsLog, RunMeta};
pub use plot::emit_plots;
