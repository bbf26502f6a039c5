use crate::error::{Error, Result};
use crate::flow::{State, VectorField};

use super::config::SolverConfig;
use super::init::init_trajectory;
use super::log::{IterationRecord, Method, SolveLog};
use super::problem::InverseProblem;
use super::sweep::backward_sweep;
use super::trajectory::{trajectory_objective, Trajectory};

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub x_star: State,
    pub trajectory: Trajectory,
    pub log: SolveLog,
}

pub(crate) fn check_problem(problem: &InverseProblem, field: &VectorField) -> Result<()> {
    if problem.state_dim() != field.dim() {
        return Err(Error::contract(format!(
            "data term acts on dimension {}, the flow on {}",
            problem.state_dim(),
            field.dim()
        )));
    }
    Ok(())
}

/// Alternating minimization: `inner_sweeps` backward sweeps on the shooting
/// points for fixed `x*`, then `x* <- argmin Phi(x) + alpha/2 |x - x_K|^2`,
/// repeated `outer_iters` times or until the full objective
/// `Phi(x*) + J` improves by less than `early_stop`.
pub fn ms_flow_solve(problem: &InverseProblem, field: &VectorField, cfg: &SolverConfig) -> Result<SolveOutcome> {
    cfg.validate()?;
    check_problem(problem, field)?;
    let counters = field.counters();
    // Objective evaluations for the log go through an uncounted copy.
    let probe = field.clone();

    let start = counters.snapshot();
    counters.reset_peak();
    let mut traj = init_trajectory(&problem.observation, field, cfg)?;
    let mut x_star = traj.terminal.clone();
    let init_counts = counters.snapshot().since(&start);

    let mut j = trajectory_objective(&traj, &x_star, &probe, cfg)?;
    let m = problem.metrics(&x_star)?;
    let mut full = m.phi + j;
    let mut log = SolveLog {
        method: Method::MsFlow,
        segments: cfg.segments,
        substeps: cfg.substeps,
        inner_sweeps: cfg.inner_sweeps,
        grad_mode: Some(cfg.grad_mode),
        line_search: cfg.line_search,
        state_count: cfg.segments + 1,
        records: vec![IterationRecord::new(0, 0, j, m, init_counts)],
        sweep_objectives: Vec::new(),
        diagnostics: Vec::new(),
    };

    for it in 1..=cfg.outer_iters {
        let mut step = || -> Result<(f64, super::problem::Metrics, Vec<f64>)> {
            let mut trace = vec![trajectory_objective(&traj, &x_star, &probe, cfg)?];
            for sweep in 1..=cfg.inner_sweeps {
                let rep = backward_sweep(&mut traj, &x_star, field, cfg)?;
                for b in rep.failed_blocks() {
                    log.diagnostics
                        .push(format!("iteration {it} sweep {sweep}: line search exhausted on block {b}"));
                }
                trace.push(trajectory_objective(&traj, &x_star, &probe, cfg)?);
            }
            x_star = problem.data_update(&traj.points[cfg.segments], cfg.alpha, &cfg.data_inner)?;
            traj.terminal = x_star.clone();
            let j = trajectory_objective(&traj, &x_star, &probe, cfg)?;
            Ok((j, problem.metrics(&x_star)?, trace))
        };
        let before = counters.snapshot();
        counters.reset_peak();
        let (j_new, m, trace) = step().map_err(|e| e.at_iteration(it))?;
        let counts = counters.snapshot().since(&before);
        j = j_new;
        log.records.push(IterationRecord::new(it, cfg.inner_sweeps, j, m, counts));
        log.sweep_objectives.push(trace);
        let full_new = m.phi + j;
        if let Some(tol) = cfg.early_stop {
            if full - full_new < tol {
                log.diagnostics.push(format!("early stop after iteration {it}"));
                break;
            }
        }
        full = full_new;
    }
    Ok(SolveOutcome {
        x_star,
        trajectory: traj,
        log,
    })
}
