//! Objective traces of exact, Jacobian-free and simultaneous-gradient sweeps
//! with Armijo backtracking, from one shared starting trajectory.
//!
//!     cargo run --release --example convergence_comparison
//!
//! Trains a small mixture flow first (a few seconds in release mode).

use std::path::Path;

use msflow::flow::VectorField;
use msflow::harness::{build_problem, ExperimentConfig};
use msflow::solver::{backward_sweep, init_trajectory, trajectory_objective, GradMode, LineSearch, SolverConfig};
use msflow::train::train_flow;

fn main() -> msflow::Result<()> {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut cfg = ExperimentConfig::load(configs.join("gmm_inpaint.toml"))?;
    cfg.training.steps = 800;
    let net = train_flow(&cfg.training_set()?, cfg.initial_net()?, &cfg.schedule())?.net;
    let field = VectorField::learned(net);
    let problem = build_problem(&cfg, &configs)?;
    let base = SolverConfig { line_search: LineSearch::armijo(), ..cfg.solver_config.clone() };
    let start = init_trajectory(&problem.observation, &field, &base)?;
    let x_star = problem.data_update(&start.points[base.segments], base.alpha, &base.data_inner)?;

    let checkpoints = [0usize, 1, 2, 5, 10, 25, 50, 100];
    println!("{:>6} {:>14} {:>14} {:>14}", "sweep", "exact", "jacobian_free", "full_gd");
    let mut traces = Vec::new();
    for mode in [GradMode::Exact, GradMode::JacobianFree, GradMode::FullGradient] {
        let c = SolverConfig { grad_mode: mode, ..base.clone() };
        let mut traj = start.clone();
        let mut trace = vec![trajectory_objective(&traj, &x_star, &field, &c)?];
        for _ in 0..100 {
            backward_sweep(&mut traj, &x_star, &field, &c)?;
            trace.push(trajectory_objective(&traj, &x_star, &field, &c)?);
        }
        traces.push(trace);
    }
    for s in checkpoints {
        println!("{s:>6} {:>14.6e} {:>14.6e} {:>14.6e}", traces[0][s], traces[1][s], traces[2][s]);
    }
    Ok(())
}
