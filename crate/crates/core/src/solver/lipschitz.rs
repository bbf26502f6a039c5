use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{State, VectorField};
use crate::rng;

use super::config::SolverConfig;
use super::trajectory::{block_gradient, Trajectory};

pub const POWER_MAX_ITERS: usize = 100;
pub const POWER_REL_TOL: f64 = 1e-6;

/// Estimated Lipschitz constant of one block gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when power iteration hit its cap; `value` is then the last
    /// iterate.
    pub converged: bool,
}

/// Largest eigenvalue magnitude of each block Hessian `d^2 J / dx_k^2` at the
/// current trajectory, with `x*` taken from `traj.terminal`.
///
/// Hessian-vector products come from central differences of the exact block
/// gradient. Evaluations are charged to a private copy of the field.
pub fn estimate_block_lipschitz(
    traj: &Trajectory,
    field: &VectorField,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Vec<LipschitzEstimate>> {
    let mut r = rng::seeded(seed);
    let mut directions: Vec<State> = traj
        .points
        .iter()
        .map(|u| State::from_fn(u.len(), |_, _| r.random_range(-1.0..1.0)))
        .collect();
    estimate_block_lipschitz_from(traj, field, cfg, &mut directions)
}

/// Same as [`estimate_block_lipschitz`], but power iteration starts from
/// `directions` and leaves the final iterates there. Re-estimating after a
/// small move of the trajectory then takes only a few products.
pub fn estimate_block_lipschitz_from(
    traj: &Trajectory,
    field: &VectorField,
    cfg: &SolverConfig,
    directions: &mut [State],
) -> Result<Vec<LipschitzEstimate>> {
    if directions.len() != traj.points.len() || directions.iter().zip(&traj.points).any(|(v, u)| v.len() != u.len()) {
        return Err(Error::contract("need one start direction of state dimension per block"));
    }
    let probe = field.clone();
    let x_star = &traj.terminal;
    directions
        .iter_mut()
        .enumerate()
        .map(|(k, v)| {
            let u = &traj.points[k];
            let eps = 1e-5 * u.norm().max(1.0);
            let hv = |v: &State| -> Result<State> {
                let gp = block_gradient(traj, x_star, &probe, cfg, k, &(u + v * eps))?;
                let gm = block_gradient(traj, x_star, &probe, cfg, k, &(u - v * eps))?;
                Ok((gp - gm) / (2.0 * eps))
            };
            let n = v.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::contract(format!("start direction of block {k} has norm {n}")));
            }
            *v /= n;
            let mut value = 0.0;
            for it in 1..=POWER_MAX_ITERS {
                let h = hv(v)?;
                let next = h.norm();
                if next == 0.0 {
                    return Ok(LipschitzEstimate { value: 0.0, iterations: it, converged: true });
                }
                *v = h / next;
                let done = (next - value).abs() <= POWER_REL_TOL * next;
                value = next;
                if done {
                    return Ok(LipschitzEstimate { value, iterations: it, converged: true });
                }
            }
            Ok(LipschitzEstimate { value, iterations: POWER_MAX_ITERS, converged: false })
        })
        .collect()
}

/// Step sizes `eta_k = 1 / L_k`; blocks with a vanishing estimate get 1.
pub fn inverse_lipschitz_steps(estimates: &[LipschitzEstimate]) -> Vec<f64> {
    estimates
        .iter()
        .map(|e| if e.value > 0.0 { 1.0 / e.value } else { 1.0 })
        .collect()
}
