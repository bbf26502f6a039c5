use serde::{Deserialize, Serialize};

use crate::counters::CounterSnapshot;

use super::config::{GradMode, LineSearch};
use super::problem::Metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MsFlow,
    DFlow,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::MsFlow => "ms_flow",
            Method::DFlow => "d_flow",
        }
    }
}

/// One row of the per-iteration log. Row 0 describes the initialization.
///
/// Counters are the deltas of the iteration; evaluations made only to fill
/// in `objective` are not counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub outer_iter: usize,
    /// Sweeps run within the iteration.
    pub sweep: usize,
    /// Solver objective: the trajectory objective for MS-Flow,
    /// `Phi(x(1)) + lambda R(x_0)` for D-Flow.
    pub objective: f64,
    pub phi: f64,
    pub residual: f64,
    pub psnr: Option<f64>,
    pub n_forward: u64,
    pub n_vjp: u64,
    pub peak_live_tapes: u64,
}

impl IterationRecord {
    pub(crate) fn new(
        outer_iter: usize,
        sweep: usize,
        objective: f64,
        m: Metrics,
        c: CounterSnapshot,
    ) -> Self {
        IterationRecord {
            outer_iter,
            sweep,
            objective,
            phi: m.phi,
            residual: m.residual,
            psnr: m.psnr,
            n_forward: c.n_forward,
            n_vjp: c.n_vjp,
            peak_live_tapes: c.peak_live_tapes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveLog {
    pub method: Method,
    pub segments: usize,
    pub substeps: usize,
    pub inner_sweeps: usize,
    /// `None` for D-Flow.
    pub grad_mode: Option<GradMode>,
    pub line_search: LineSearch,
    /// States held by the optimizer: `K + 1` shooting points or one latent.
    pub state_count: usize,
    pub records: Vec<IterationRecord>,
    /// Per outer iteration: the objective before the first sweep and after
    /// each sweep, at fixed `x*`.
    pub sweep_objectives: Vec<Vec<f64>>,
    pub diagnostics: Vec<String>,
}

impl SolveLog {
    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("a log always holds the initialization row")
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}
