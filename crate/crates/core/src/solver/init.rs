use crate::error::{Error, Result};
use crate::flow::{State, TimeGrid, VectorField};
use crate::operators::Observation;
use crate::rng;

use super::config::{Anchor, SolverConfig};
use super::trajectory::{Segments, Trajectory};

/// The anchor pulled back to `t = 0`, before mixing with noise.
pub fn pulled_back_anchor(obs: &Observation, field: &VectorField, cfg: &SolverConfig) -> Result<State> {
    let d = field.dim();
    let anchor = match cfg.anchor {
        Anchor::Zero => return Ok(State::zeros(d)),
        Anchor::Adjoint => obs.operator.apply_adjoint(&obs.y)?,
    };
    if anchor.len() != d {
        return Err(Error::contract(format!(
            "adjoint anchor has dimension {}, the flow state {d}; use the zero anchor",
            anchor.len()
        )));
    }
    let grid = TimeGrid::uniform(cfg.segments)?;
    let seg = Segments::new(field, &grid, cfg.substeps);
    let mut w = anchor;
    for k in (0..cfg.segments).rev() {
        w = seg.map_backward(k, &w)?;
    }
    Ok(w)
}

/// `x_0 = sqrt(beta) w(0) + sqrt(1 - beta) z` with `z ~ N(0, I)` drawn from
/// `cfg.seed`.
pub fn init_latent(obs: &Observation, field: &VectorField, cfg: &SolverConfig) -> Result<State> {
    cfg.validate()?;
    let w0 = pulled_back_anchor(obs, field, cfg)?;
    let z = rng::standard_normal(&mut rng::seeded(cfg.seed), field.dim());
    let beta = cfg.init_beta;
    Ok(w0 * beta.sqrt() + z * (1.0 - beta).sqrt())
}

/// Initial shooting points: `x_0` from [`init_latent`], its forward endpoint
/// `e` as `x_K` and as `x*`, and the points in between on the straight line
/// from `x_0` to `e`.
pub fn init_trajectory(obs: &Observation, field: &VectorField, cfg: &SolverConfig) -> Result<Trajectory> {
    let x0 = init_latent(obs, field, cfg)?;
    let grid = TimeGrid::uniform(cfg.segments)?;
    let seg = Segments::new(field, &grid, cfg.substeps);
    let mut end = x0.clone();
    for k in 0..cfg.segments {
        end = seg.map(k, &end)?;
    }
    let k_last = cfg.segments;
    let step = (&end - &x0) / k_last as f64;
    let mut points: Vec<State> = (0..k_last).map(|k| &x0 + &step * k as f64).collect();
    points.push(end.clone());
    Trajectory::new(points, grid, end)
}
