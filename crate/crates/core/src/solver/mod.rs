//! Multiple-shooting and single-shooting solvers for latent inverse problems.

pub mod config;
pub mod dflow;
pub mod init;
pub mod lipschitz;
pub mod log;
pub mod msflow;
pub mod problem;
pub mod report;
pub mod sweep;
pub mod trajectory;

pub use config::{Anchor, GradMode, LineSearch, SolverConfig};
pub use dflow::{d_flow_gradient, d_flow_solve, DFlowOutcome};
pub use init::{init_latent, init_trajectory, pulled_back_anchor};
pub use lipschitz::{estimate_block_lipschitz, estimate_block_lipschitz_from, inverse_lipschitz_steps, LipschitzEstimate};
pub use log::{IterationRecord, Method, SolveLog};
pub use msflow::{ms_flow_solve, SolveOutcome};
pub use problem::{InverseProblem, Metrics};
pub use report::{counter_model, counter_report, ComplexityRecord, CounterModel, CounterRow};
pub use sweep::{backward_sweep, BlockUpdate, SweepReport};
pub use trajectory::{block_gradient, trajectory_gradient, trajectory_objective, Trajectory};
