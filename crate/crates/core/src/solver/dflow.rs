//! Single-shooting baseline: optimize the initial latent through the whole
//! Euler trajectory, differentiating by a reverse sweep over every retained
//! activation tape.

use crate::error::{Error, Result};
use crate::flow::{State, TimeGrid, VectorField};
use crate::prox::RadialPrior;

use super::config::{LineSearch, SolverConfig};
use super::init::init_latent;
use super::log::{IterationRecord, Method, SolveLog};
use super::msflow::check_problem;
use super::problem::InverseProblem;
use super::trajectory::Segments;

#[derive(Clone, Debug)]
pub struct DFlowOutcome {
    pub x0: State,
    /// Endpoint `x(1)` of the final latent.
    pub x_star: State,
    pub log: SolveLog,
}

fn prior_value(prior: &Option<RadialPrior>, x0: &State) -> Result<f64> {
    prior.map_or(Ok(0.0), |p| p.weighted_value(x0))
}

/// `(Phi(x(1)) + lambda R(x_0), x(1))` without keeping tapes.
fn value(problem: &InverseProblem, seg: &Segments, prior: &Option<RadialPrior>, x0: &State) -> Result<(f64, State)> {
    let mut x = x0.clone();
    for k in 0..seg.grid.segments() {
        x = seg.map(k, &x)?;
    }
    Ok((problem.fit.value(&x)? + prior_value(prior, x0)?, x))
}

/// Objective and its gradient with respect to `x_0`.
///
/// Every Euler step keeps its tape until the reverse sweep reaches it, so
/// peak tape memory grows with the number of steps.
pub fn d_flow_gradient(
    problem: &InverseProblem,
    field: &VectorField,
    cfg: &SolverConfig,
    x0: &State,
) -> Result<(f64, State)> {
    cfg.validate()?;
    check_problem(problem, field)?;
    let grid = TimeGrid::uniform(cfg.segments)?;
    let seg = Segments::new(field, &grid, cfg.substeps);
    let prior = cfg.prior(field.dim())?;
    let mut tapes = Vec::with_capacity(cfg.segments);
    let mut x = x0.clone();
    for k in 0..cfg.segments {
        let (next, t) = seg.map_taped(k, &x)?;
        tapes.push(t);
        x = next;
    }
    let j = problem.fit.value(&x)? + prior_value(&prior, x0)?;
    let mut w = problem.fit.gradient(&x)?;
    for k in (0..cfg.segments).rev() {
        let t = tapes.pop().expect("one tape set per segment");
        w = seg.vjp(k, t, &w)?;
    }
    if let Some(p) = prior {
        w += p.weighted_grad(x0)?;
    }
    Ok((j, w))
}

/// Gradient descent on `x_0` with step `eta`, optionally backtracking.
pub fn d_flow_solve(problem: &InverseProblem, field: &VectorField, cfg: &SolverConfig) -> Result<DFlowOutcome> {
    cfg.validate()?;
    check_problem(problem, field)?;
    let counters = field.counters();
    let probe = field.clone();
    let grid = TimeGrid::uniform(cfg.segments)?;
    let seg = Segments::new(field, &grid, cfg.substeps);
    let probe_seg = Segments::new(&probe, &grid, cfg.substeps);
    let prior = cfg.prior(field.dim())?;

    let start = counters.snapshot();
    counters.reset_peak();
    let mut x0 = init_latent(&problem.observation, field, cfg)?;
    let init_counts = counters.snapshot().since(&start);
    let (mut j, mut x1) = value(problem, &probe_seg, &prior, &x0)?;
    let mut log = SolveLog {
        method: Method::DFlow,
        segments: cfg.segments,
        substeps: cfg.substeps,
        inner_sweeps: 1,
        grad_mode: None,
        line_search: cfg.line_search,
        state_count: 1,
        records: vec![IterationRecord::new(0, 0, j, problem.metrics(&x1)?, init_counts)],
        sweep_objectives: Vec::new(),
        diagnostics: Vec::new(),
    };

    let diverged = |it: usize, last: &State| Error::SolveDiverged {
        iteration: it,
        last_finite: last.iter().copied().collect(),
    };
    for it in 1..=cfg.outer_iters {
        let before = counters.snapshot();
        counters.reset_peak();
        let (j0, g) = match d_flow_gradient(problem, field, cfg, &x0) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(it, &x0)),
            Err(e) => return Err(e.at_iteration(it)),
        };
        let next = match cfg.line_search {
            LineSearch::Off => Some(&x0 - &g * cfg.eta),
            LineSearch::Armijo {
                c1,
                shrink,
                max_backtracks,
            } => {
                let g2 = g.norm_squared();
                let mut t = cfg.eta;
                let mut found = None;
                for _ in 0..=max_backtracks {
                    let trial = &x0 - &g * t;
                    match value(problem, &seg, &prior, &trial) {
                        Ok((f, _)) if f.is_finite() && f <= j0 - c1 * t * g2 => {
                            found = Some(trial);
                            break;
                        }
                        Ok(_) | Err(Error::NonFinite { .. } | Error::Singularity { .. }) => {}
                        Err(e) => return Err(e.at_iteration(it)),
                    }
                    t *= shrink;
                }
                if found.is_none() && g2 > 0.0 {
                    log.diagnostics.push(format!("iteration {it}: line search exhausted"));
                }
                found
            }
        };
        if let Some(n) = next {
            if !n.iter().all(|v| v.is_finite()) {
                return Err(diverged(it, &x0));
            }
            x0 = n;
        }
        let counts = counters.snapshot().since(&before);
        (j, x1) = match value(problem, &probe_seg, &prior, &x0) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(diverged(it, &x0)),
            Err(e) => return Err(e.at_iteration(it)),
        };
        let m = problem.metrics(&x1).map_err(|e| e.at_iteration(it))?;
        log.records.push(IterationRecord::new(it, 0, j, m, counts));
    }
    Ok(DFlowOutcome { x0, x_star: x1, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, VelocityNet};
    use crate::operators::{make_observation, LinearOperator};
    use crate::rng;
    use nalgebra::DMatrix;

    fn problem(d: usize) -> InverseProblem {
        let mut r = rng::seeded(3);
        let truth = rng::standard_normal(&mut r, d);
        let op = LinearOperator::mask(d, (0..d).step_by(2).collect()).unwrap();
        InverseProblem::quadratic(make_observation(&op, &truth, 0.0, 0).unwrap())
    }

    #[test]
    fn identity_flow_gradient_is_direct_gradient() {
        let p = problem(4);
        let x0 = State::from_row_slice(&[0.5, -0.2, 1.0, 2.0]);
        let cfg = SolverConfig { lambda: 0.05, segments: 7, ..Default::default() };
        let (_, g) = d_flow_gradient(&p, &VectorField::zero(4), &cfg, &x0).unwrap();
        let prior = cfg.prior(4).unwrap().unwrap();
        assert_eq!(g, p.fit.gradient(&x0).unwrap() + prior.weighted_grad(&x0).unwrap());
    }

    #[test]
    fn linear_flow_gradient_matches_chain_rule() {
        let m = DMatrix::from_row_slice(2, 2, &[0.3, -0.8, 0.5, 0.1]);
        let f = VectorField::linear(m.clone()).unwrap();
        let p = problem(2);
        let x0 = State::from_row_slice(&[0.7, -0.4]);
        let n = 9;
        let cfg = SolverConfig { lambda: 0.0, segments: n, ..Default::default() };
        let (_, g) = d_flow_gradient(&p, &f, &cfg, &x0).unwrap();
        let step = DMatrix::identity(2, 2) + &m / n as f64;
        let prop = (0..n).fold(DMatrix::identity(2, 2), |acc, _| &step * acc);
        let want = prop.transpose() * p.fit.gradient(&(&prop * &x0)).unwrap();
        assert!((g - want).amax() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = VectorField::learned(VelocityNet::new(3, &[10, 10], Activation::Tanh, 1).unwrap());
        let p = problem(3);
        let cfg = SolverConfig { lambda: 0.1, segments: 5, substeps: 2, ..Default::default() };
        let x0 = State::from_row_slice(&[0.9, -0.6, 1.3]);
        let (_, g) = d_flow_gradient(&p, &f, &cfg, &x0).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut a = x0.clone();
            a[i] += eps;
            let mut b = x0.clone();
            b[i] -= eps;
            let fd = (d_flow_gradient(&p, &f, &cfg, &a).unwrap().0 - d_flow_gradient(&p, &f, &cfg, &b).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn per_iteration_counts_scale_with_steps() {
        for n in [3, 8] {
            let f = VectorField::learned(VelocityNet::new(2, &[6], Activation::Tanh, 1).unwrap());
            let cfg = SolverConfig { segments: n, outer_iters: 2, ..Default::default() };
            let out = d_flow_solve(&problem(2), &f, &cfg).unwrap();
            let n = n as u64;
            for r in &out.log.records[1..] {
                assert_eq!((r.n_forward, r.n_vjp, r.peak_live_tapes), (n, n, n));
            }
        }
    }

    #[test]
    fn huge_steps_report_divergence() {
        let f = VectorField::linear(DMatrix::identity(2, 2) * 3.0).unwrap();
        let cfg = SolverConfig { eta: 1e200, segments: 4, outer_iters: 5, lambda: 0.0, ..Default::default() };
        match d_flow_solve(&problem(2), &f, &cfg) {
            Err(Error::SolveDiverged { last_finite, .. }) => {
                assert!(last_finite.iter().all(|v| v.is_finite()))
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
