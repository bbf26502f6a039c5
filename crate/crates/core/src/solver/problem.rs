use crate::error::{Error, Result};
use crate::flow::State;
use crate::operators::{psnr, Observation};
use crate::prox::{self, DataFit, FitKind, InnerSchedule};

/// A measurement, the data term built from it, and optionally the signal
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseProblem {
    pub observation: Observation,
    pub fit: DataFit,
    pub ground_truth: Option<State>,
    /// Peak-to-peak range used for PSNR.
    pub data_range: f64,
}

/// Quality of an estimate `x*`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub phi: f64,
    /// `|A rec(x*) - y|`.
    pub residual: f64,
    pub psnr: Option<f64>,
}

impl InverseProblem {
    /// Quadratic data term, no ground truth.
    pub fn quadratic(observation: Observation) -> Self {
        let fit = DataFit::quadratic(&observation);
        InverseProblem {
            observation,
            fit,
            ground_truth: None,
            data_range: 1.0,
        }
    }

    pub fn with_fit(observation: Observation, fit: DataFit) -> Self {
        InverseProblem {
            observation,
            fit,
            ground_truth: None,
            data_range: 1.0,
        }
    }

    pub fn with_ground_truth(mut self, truth: State, data_range: f64) -> Result<Self> {
        if !(data_range > 0.0) {
            return Err(Error::contract("data range must be positive"));
        }
        self.ground_truth = Some(truth);
        self.data_range = data_range;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.fit.state_dim()
    }

    pub fn metrics(&self, x_star: &State) -> Result<Metrics> {
        let phi = self.fit.value(x_star)?;
        let residual = self.fit.residual(x_star)?.norm();
        let psnr = match &self.ground_truth {
            None => None,
            Some(truth) => {
                let rec = self.fit.reconstruct(x_star)?;
                if rec.len() != truth.len() {
                    return Err(Error::contract("ground truth does not match the reconstruction"));
                }
                Some(psnr(&rec, truth, self.data_range))
            }
        };
        Ok(Metrics { phi, residual, psnr })
    }

    /// `argmin_x Phi(x) + alpha/2 |x - x_K|^2`, exactly for quadratic and
    /// one-norm terms and by inner gradient descent for latent ones.
    pub fn data_update(&self, x_k: &State, alpha: f64, inner: &InnerSchedule) -> Result<State> {
        match self.fit.kind() {
            FitKind::Quadratic => prox::prox_quadratic(&self.fit, x_k, alpha),
            FitKind::OneNorm => prox::prox_one_norm(&self.fit, x_k, alpha),
            FitKind::Latent => Ok(prox::data_update_iterative(&self.fit, x_k, alpha, inner)?.z),
        }
    }
}
