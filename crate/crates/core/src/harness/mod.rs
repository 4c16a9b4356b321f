//! Experiment harness: a flat config file describes a (variant × seed)
//! grid; [`run_experiment`] generates or loads the batch, fits the behavior
//! prior from it, trains every cell in parallel with early stopping, and
//! evaluates the surviving checkpoints; [`emit_reports`] writes the CSV
//! reports and a plotting script. Seeded configs reproduce every report
//! byte for byte — wall-clock timings live in their own file so they can't
//! interfere with that.

pub mod config;
pub mod reports;
pub mod run;

pub use config::{ExperimentConfig, OUTPUT_DIR_ENV};
pub use reports::{check_writable, emit_reports};
pub use run::{
    batch_trajectories, derive_seed, one_hot_tabular_batch, overestimation_bias, prepare,
    rollout_returns, run_experiment, run_with_setup, under_covered_pairs,
    variant_overestimation_bias, CellReport, EvalReport, ExperimentEnv, ExperimentSetup,
};
