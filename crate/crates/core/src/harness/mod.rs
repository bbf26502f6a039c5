//! Reproducible experiment runs: configs, on-disk artifacts and the
//! `train` / `solve` / `ablate` / `report` commands.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod ledger;

pub use commands::{
    ablate_cells, build_problem, cmd_ablate, cmd_report, cmd_solve, cmd_train, load_checkpoint, read_ablate, read_report,
    AblateRow, ReportRow, TrainSummary,
};
pub use config::{AblateGrid, ExperimentConfig, FitChoice, ModelSpec, ProblemSpec, SolverChoice, TrainingSpec};
pub use ledger::{FinalMetrics, RunLedger, Timings};
