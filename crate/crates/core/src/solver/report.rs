use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::GradMode;
use super::log::{Method, SolveLog};

/// Per-iteration operation counts predicted by the complexity model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterModel {
    pub n_forward: u64,
    pub n_vjp: u64,
    pub peak_live_tapes: u64,
    /// When true, `n_forward` is a lower bound (line-search trials add
    /// forward passes).
    pub forward_at_least: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRow {
    pub outer_iter: usize,
    pub n_forward: u64,
    pub n_vjp: u64,
    pub peak_live_tapes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRecord {
    pub method: Method,
    pub grad_mode: Option<GradMode>,
    pub segments: usize,
    pub substeps: usize,
    pub inner_sweeps: usize,
    pub state_count: usize,
    pub model: CounterModel,
    /// Outer iterations only; the initialization row is excluded.
    pub rows: Vec<CounterRow>,
}

/// The model for one outer iteration of the solver described by `log`.
///
/// With `n = K s` Euler steps per trajectory:
/// D-Flow `(n, n, n)`, Jacobian-free sweeps `(L n, 0, 1)`, exact and full
/// gradient sweeps `(L n, L n, s)`.
pub fn counter_model(log: &SolveLog) -> CounterModel {
    let n = (log.segments * log.substeps) as u64;
    let s = log.substeps as u64;
    let l = log.inner_sweeps as u64;
    let forward_at_least = log.line_search.is_on();
    let (n_forward, n_vjp, peak_live_tapes) = match (log.method, log.grad_mode) {
        (Method::DFlow, _) => (n, n, n),
        (Method::MsFlow, Some(GradMode::JacobianFree)) => (l * n, 0, 1),
        (Method::MsFlow, _) => (l * n, l * n, s),
    };
    CounterModel {
        n_forward,
        n_vjp,
        peak_live_tapes,
        forward_at_least,
    }
}

/// Check every outer iteration of `log` against [`counter_model`], naming
/// the first counter that deviates.
pub fn counter_report(log: &SolveLog) -> Result<ComplexityRecord> {
    let model = counter_model(log);
    let expected_states = match log.method {
        Method::DFlow => 1,
        Method::MsFlow => log.segments + 1,
    };
    if log.state_count != expected_states {
        return Err(Error::ModelMismatch {
            iteration: 0,
            counter: "trajectory_state_count",
            expected: expected_states as u64,
            observed: log.state_count as u64,
        });
    }
    let mut rows = Vec::new();
    for r in log.records.iter().filter(|r| r.outer_iter > 0) {
        let mismatch = |counter, expected, observed| Error::ModelMismatch {
            iteration: r.outer_iter,
            counter,
            expected,
            observed,
        };
        let fwd_ok = if model.forward_at_least {
            r.n_forward >= model.n_forward
        } else {
            r.n_forward == model.n_forward
        };
        if !fwd_ok {
            return Err(mismatch("n_forward", model.n_forward, r.n_forward));
        }
        if r.n_vjp != model.n_vjp {
            return Err(mismatch("n_vjp", model.n_vjp, r.n_vjp));
        }
        if r.peak_live_tapes != model.peak_live_tapes {
            return Err(mismatch("peak_live_tapes", model.peak_live_tapes, r.peak_live_tapes));
        }
        rows.push(CounterRow {
            outer_iter: r.outer_iter,
            n_forward: r.n_forward,
            n_vjp: r.n_vjp,
            peak_live_tapes: r.peak_live_tapes,
        });
    }
    Ok(ComplexityRecord {
        method: log.method,
        grad_mode: log.grad_mode,
        segments: log.segments,
        substeps: log.substeps,
        inner_sweeps: log.inner_sweeps,
        state_count: log.state_count,
        model,
        rows,
    })
}
