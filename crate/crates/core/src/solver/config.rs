use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prox::{InnerSchedule, RadialPrior};

/// How block gradients of the trajectory objective are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Gauss-Seidel sweep with exact block gradients (one VJP per block).
    Exact,
    /// Gauss-Seidel sweep with the segment Jacobian replaced by the identity.
    JacobianFree,
    /// Simultaneous gradient step on all blocks.
    #[serde(rename = "full_gd")]
    FullGradient,
}

impl GradMode {
    pub fn tag(self) -> &'static str {
        match self {
            GradMode::Exact => "exact",
            GradMode::JacobianFree => "jacobian_free",
            GradMode::FullGradient => "full_gd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineSearch {
    Off,
    /// Backtracking until `f(x - t g) <= f(x) - c1 t |g|^2`.
    Armijo {
        c1: f64,
        shrink: f64,
        max_backtracks: usize,
    },
}

impl LineSearch {
    pub fn armijo() -> Self {
        LineSearch::Armijo {
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 30,
        }
    }

    pub fn is_on(&self) -> bool {
        matches!(self, LineSearch::Armijo { .. })
    }
}

/// Data-derived point the initial latent is pulled back from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// `A^T y`.
    Adjoint,
    Zero,
}

/// Hyperparameters of the multiple-shooting solver and of the
/// single-shooting baseline (which uses `eta`, `outer_iters`, `line_search`,
/// `lambda` and the initialization fields).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Coupling between the trajectory endpoint and the estimate.
    pub alpha: f64,
    /// Weight of the segment defect penalties.
    pub gamma: f64,
    /// Weight of the radial prior on the initial point.
    pub lambda: f64,
    /// Sweep step size, used for every block unless `step_sizes` is set.
    pub eta: f64,
    /// Number of shooting segments `K` (= Euler steps when `substeps = 1`).
    pub segments: usize,
    #[serde(default = "one")]
    pub substeps: usize,
    /// Sweeps per outer iteration `L`.
    pub inner_sweeps: usize,
    pub outer_iters: usize,
    pub grad_mode: GradMode,
    pub line_search: LineSearch,
    /// Mixing weight between the pulled-back anchor and fresh noise.
    pub init_beta: f64,
    pub seed: u64,
    #[serde(default = "default_anchor")]
    pub anchor: Anchor,
    /// Per-block step sizes `eta_0..eta_K`, overriding `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_sizes: Option<Vec<f64>>,
    /// Stop once an outer iteration improves the full objective by less.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<f64>,
    /// Inner gradient descent for latent data fits.
    #[serde(default)]
    pub data_inner: InnerSchedule,
}

fn one() -> usize {
    1
}

fn default_anchor() -> Anchor {
    Anchor::Adjoint
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha: 0.1,
            gamma: 1.0,
            lambda: 1e-3,
            eta: 0.2,
            segments: 6,
            substeps: 1,
            inner_sweeps: 1,
            outer_iters: 50,
            grad_mode: GradMode::JacobianFree,
            line_search: LineSearch::Off,
            init_beta: 0.5,
            seed: 0,
            anchor: Anchor::Adjoint,
            step_sizes: None,
            early_stop: None,
            data_inner: InnerSchedule::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("solver config: {m}")));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if self.segments == 0 || self.substeps == 0 {
            return bad("segments and substeps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.init_beta) {
            return bad("init_beta must lie in [0, 1]");
        }
        if let Some(s) = &self.step_sizes {
            if s.len() != self.segments + 1 || s.iter().any(|e| !(*e > 0.0)) {
                return bad("step_sizes needs segments + 1 positive entries");
            }
        }
        if let LineSearch::Armijo { c1, shrink, .. } = self.line_search {
            if !(c1 > 0.0 && c1 < 1.0 && shrink > 0.0 && shrink < 1.0) {
                return bad("Armijo needs c1 and shrink in (0, 1)");
            }
        }
        Ok(())
    }

    /// The weighted prior on the initial point, absent when `lambda = 0`.
    pub fn prior(&self, dim: usize) -> Result<Option<RadialPrior>> {
        if self.lambda == 0.0 {
            Ok(None)
        } else {
            RadialPrior::new(dim, self.lambda).map(Some)
        }
    }

    pub fn block_step(&self, k: usize) -> f64 {
        self.step_sizes.as_ref().map_or(self.eta, |s| s[k])
    }
}
