//! The shooting-point objective
//!
//! `J(x_0..x_K) = alpha/2 |x* - x_K|^2 + lambda R(x_0)
//!               + gamma/2 sum_{k=1..K} |x_k - F_{k-1}(x_{k-1})|^2`
//!
//! where `F_k` maps a state from `t_k` to `t_{k+1}` with explicit Euler.

use crate::error::{Error, Result};
use crate::flow::{FieldTape, State, TimeGrid, VectorField};
use crate::prox::RadialPrior;

use super::config::SolverConfig;

/// Shooting points `x_0..x_K` on a time grid plus the terminal estimate `x*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<State>,
    pub grid: TimeGrid,
    pub terminal: State,
    versions: Vec<u64>,
}

impl Trajectory {
    pub fn new(points: Vec<State>, grid: TimeGrid, terminal: State) -> Result<Self> {
        if points.len() != grid.segments() + 1 {
            return Err(Error::contract(format!(
                "trajectory with {} segments needs {} points, got {}",
                grid.segments(),
                grid.segments() + 1,
                points.len()
            )));
        }
        let d = terminal.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::contract("shooting points must share the terminal dimension"));
        }
        if !points.iter().chain([&terminal]).all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::non_finite("trajectory"));
        }
        let versions = vec![0; points.len()];
        Ok(Trajectory {
            points,
            grid,
            terminal,
            versions,
        })
    }

    pub fn segments(&self) -> usize {
        self.grid.segments()
    }

    pub fn dim(&self) -> usize {
        self.terminal.len()
    }

    /// How many times each shooting point has been visited by a sweep.
    pub fn versions(&self) -> &[u64] {
        &self.versions
    }

    pub(crate) fn bump_version(&mut self, k: usize) {
        self.versions[k] += 1;
    }

    pub fn norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Weights shared by every term of the objective.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Weights {
    pub alpha: f64,
    pub gamma: f64,
    pub prior: Option<RadialPrior>,
}

impl Weights {
    pub fn from_config(cfg: &SolverConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Weights {
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            prior: cfg.prior(dim)?,
        })
    }

    pub fn prior_value(&self, x0: &State) -> Result<f64> {
        self.prior.map_or(Ok(0.0), |p| p.weighted_value(x0))
    }

    pub fn prior_grad(&self, x0: &State) -> Result<State> {
        self.prior
            .map_or_else(|| Ok(State::zeros(x0.len())), |p| p.weighted_grad(x0))
    }
}

/// Segment `k` of the grid, integrated with `substeps` Euler steps.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Segments<'a> {
    pub field: &'a VectorField,
    pub grid: &'a TimeGrid,
    pub substeps: usize,
}

impl<'a> Segments<'a> {
    pub fn new(field: &'a VectorField, grid: &'a TimeGrid, substeps: usize) -> Self {
        Segments {
            field,
            grid,
            substeps,
        }
    }

    fn h(&self, k: usize) -> f64 {
        self.grid.delta(k) / self.substeps as f64
    }

    fn sub_time(&self, k: usize, j: usize) -> f64 {
        (self.grid.node(k) + j as f64 * self.h(k)).min(1.0)
    }

    /// `F_k(x)`, activations released after every substep.
    pub fn map(&self, k: usize, x: &State) -> Result<State> {
        let h = self.h(k);
        let mut z = x.clone();
        for j in 0..self.substeps {
            let v = self.field.eval(&z, self.sub_time(k, j)).map_err(|e| e.in_segment(k))?;
            z += v * h;
        }
        finite(z, k)
    }

    /// `F_k(x)` keeping one tape per substep for [`Segments::vjp`].
    pub fn map_taped(&self, k: usize, x: &State) -> Result<(State, Vec<FieldTape>)> {
        let h = self.h(k);
        let mut z = x.clone();
        let mut tapes = Vec::with_capacity(self.substeps);
        for j in 0..self.substeps {
            let (v, tape) = self
                .field
                .forward(&z, self.sub_time(k, j))
                .map_err(|e| e.in_segment(k))?;
            tapes.push(tape);
            z += v * h;
        }
        Ok((finite(z, k)?, tapes))
    }

    /// `J_{F_k}^T w` by a reverse sweep over the substep tapes, which are
    /// released as soon as they are consumed.
    pub fn vjp(&self, k: usize, mut tapes: Vec<FieldTape>, w: &State) -> Result<State> {
        let h = self.h(k);
        let mut w = w.clone();
        while let Some(tape) = tapes.pop() {
            let jt = self.field.vjp(&tape, &w).map_err(|e| e.in_segment(k))?;
            w += jt * h;
        }
        finite(w, k)
    }

    /// Inverse direction: negated substeps from `t_{k+1}` back to `t_k`.
    pub fn map_backward(&self, k: usize, x: &State) -> Result<State> {
        let h = self.h(k);
        let mut w = x.clone();
        for j in (0..self.substeps).rev() {
            let v = self
                .field
                .eval(&w, self.sub_time(k, j + 1))
                .map_err(|e| e.in_segment(k))?;
            w -= v * h;
        }
        finite(w, k)
    }
}

fn finite(x: State, k: usize) -> Result<State> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::non_finite("segment map").in_segment(k))
    }
}

fn check_dims(traj: &Trajectory, x_star: &State, field: &VectorField) -> Result<()> {
    if x_star.len() != traj.dim() || field.dim() != traj.dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: trajectory {}, x* {}, field {}",
            traj.dim(),
            x_star.len(),
            field.dim()
        )));
    }
    Ok(())
}

pub(crate) fn objective_with(
    traj: &Trajectory,
    x_star: &State,
    seg: &Segments,
    w: &Weights,
) -> Result<f64> {
    let k_last = traj.segments();
    let mut j = 0.5 * w.alpha * (x_star - &traj.points[k_last]).norm_squared();
    j += w.prior_value(&traj.points[0])?;
    for k in 1..=k_last {
        let z = seg.map(k - 1, &traj.points[k - 1])?;
        j += 0.5 * w.gamma * (&traj.points[k] - z).norm_squared();
    }
    Ok(j)
}

/// Value of the trajectory objective for a fixed estimate `x*`.
pub fn trajectory_objective(
    traj: &Trajectory,
    x_star: &State,
    field: &VectorField,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_dims(traj, x_star, field)?;
    let w = Weights::from_config(cfg, traj.dim())?;
    objective_with(traj, x_star, &Segments::new(field, &traj.grid, cfg.substeps), &w)
}

/// Objective value and gradient of every block in one pass.
pub(crate) fn value_and_gradient_with(
    traj: &Trajectory,
    x_star: &State,
    seg: &Segments,
    w: &Weights,
) -> Result<(f64, Vec<State>)> {
    let k_last = traj.segments();
    let d = traj.dim();
    let mut g = vec![State::zeros(d); k_last + 1];
    let terminal = x_star - &traj.points[k_last];
    let mut j = 0.5 * w.alpha * terminal.norm_squared() + w.prior_value(&traj.points[0])?;
    g[0] += w.prior_grad(&traj.points[0])?;
    g[k_last] -= terminal * w.alpha;
    for k in 0..k_last {
        let (z, tapes) = seg.map_taped(k, &traj.points[k])?;
        let r = &traj.points[k + 1] - z;
        let back = seg.vjp(k, tapes, &r)?;
        j += 0.5 * w.gamma * r.norm_squared();
        g[k + 1] += &r * w.gamma;
        g[k] -= back * w.gamma;
    }
    Ok((j, g))
}

/// Exact gradient of the trajectory objective with respect to every block.
///
/// Costs one taped forward and one VJP per segment; tapes of one segment are
/// released before the next segment is evaluated.
pub fn trajectory_gradient(
    traj: &Trajectory,
    x_star: &State,
    field: &VectorField,
    cfg: &SolverConfig,
) -> Result<Vec<State>> {
    check_dims(traj, x_star, field)?;
    let w = Weights::from_config(cfg, traj.dim())?;
    value_and_gradient_with(traj, x_star, &Segments::new(field, &traj.grid, cfg.substeps), &w).map(|(_, g)| g)
}

/// Exact gradient of the objective with respect to block `k` alone, with
/// block `k` set to `u` and every other block taken from `traj`.
pub fn block_gradient(
    traj: &Trajectory,
    x_star: &State,
    field: &VectorField,
    cfg: &SolverConfig,
    k: usize,
    u: &State,
) -> Result<State> {
    check_dims(traj, x_star, field)?;
    let w = Weights::from_config(cfg, traj.dim())?;
    let seg = Segments::new(field, &traj.grid, cfg.substeps);
    let k_last = traj.segments();
    let mut g = State::zeros(u.len());
    if k == k_last {
        g -= (x_star - u) * w.alpha;
    }
    if k == 0 {
        g += w.prior_grad(u)?;
    }
    if k >= 1 {
        let z = seg.map(k - 1, &traj.points[k - 1])?;
        g += (u - z) * w.gamma;
    }
    if k < k_last {
        let (z, tapes) = seg.map_taped(k, u)?;
        let r = &traj.points[k + 1] - z;
        g -= seg.vjp(k, tapes, &r)? * w.gamma;
    }
    Ok(g)
}
