use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, pairing).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared. `segment` names the shooting segment or
    /// integration step when the failure happened inside a trajectory.
    #[error("non-finite value in {context}{}", segment.map(|k| format!(" (segment {k})")).unwrap_or_default())]
    NonFinite {
        context: String,
        segment: Option<usize>,
    },

    /// The radial prior was evaluated too close to the origin.
    #[error("radial prior singular at |x0| = {norm:e}")]
    Singularity { norm: f64 },

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    /// An iterative linear solve did not reach its tolerance.
    #[error("linear solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    /// Training produced a non-finite loss. The last finite parameters are kept.
    #[error("training diverged at step {step}")]
    TrainingDiverged {
        step: usize,
        last_finite: Box<crate::net::VelocityNet>,
    },

    /// An optimizer iterate became non-finite. `last_finite` is the iterate
    /// before the failing step.
    #[error("solver diverged at iteration {iteration}")]
    SolveDiverged {
        iteration: usize,
        last_finite: Vec<f64>,
    },

    /// Observed operation counts deviate from the complexity model.
    #[error("complexity model mismatch in iteration {iteration}: {counter} expected {expected}, observed {observed}")]
    ModelMismatch {
        iteration: usize,
        counter: &'static str,
        expected: u64,
        observed: u64,
    },

    /// Failure inside an outer solver iteration.
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            segment: None,
        }
    }

    /// Attach a segment index to a numeric error that lacks one.
    pub(crate) fn in_segment(self, k: usize) -> Self {
        match self {
            Error::NonFinite {
                context,
                segment: None,
            } => Error::NonFinite {
                context,
                segment: Some(k),
            },
            other => other,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::NonFinite { .. } => "non_finite",
            Error::Singularity { .. } => "singularity",
            Error::Unsupported(_) => "unsupported",
            Error::SolverDiverged { .. } => "solver_diverged",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::SolveDiverged { .. } => "solve_diverged",
            Error::ModelMismatch { .. } => "model_mismatch",
            Error::AtIteration { source, .. } => source.kind(),
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
