//! Experiment orchestration: the attack x defense x task grid, its
//! append-only results store, report rendering, and directional claim
//! verdicts.

pub mod claims;
pub mod config;
pub mod grid;
pub mod record;
pub mod report;

pub use claims::{all_pass, check_directional_claims, render_claims, ClaimResult};
pub use config::{
    load_config, AttackSpec, DefenseSpec, ExperimentConfig, LevelSpec, Seeds, EVAL_VAL_FRACTION,
};
pub use grid::{cell_metrics, run_grid, task_metric_name, CellFailure, GridOutcome};
pub use record::{
    cell_fingerprint, hash_model_files, ExperimentRecord, ResultsStore, RESULTS_FILE,
};
pub use report::{emit_report, ReportFormat};
