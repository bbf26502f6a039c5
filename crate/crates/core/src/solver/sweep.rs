//! One pass of block updates over the shooting points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FieldTape, State, VectorField};

use super::config::{GradMode, LineSearch, SolverConfig};
use super::trajectory::{value_and_gradient_with, Segments, Trajectory, Weights};

/// What happened to one block during a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockUpdate {
    pub block: usize,
    /// Accepted step length; 0 when the line search gave up.
    pub step: f64,
    pub accepted: bool,
    pub backtracks: usize,
    /// Block objective before and after the update, evaluated only when a
    /// line search is active.
    pub phi_before: Option<f64>,
    pub phi_after: Option<f64>,
    /// Squared norm of the search direction.
    pub grad_norm_sq: f64,
    /// `|x_k^new - x_k^old|`.
    pub step_norm: f64,
    /// Version tags of the neighbours at the moment the block was updated.
    pub prev_version: Option<u64>,
    pub next_version: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// In update order: `K, K-1, ..., 0`.
    pub blocks: Vec<BlockUpdate>,
    /// `sum_k |x_k^new - x_k^old|^2`.
    pub step_norm_sq: f64,
    pub line_search_failures: usize,
}

impl SweepReport {
    pub fn failed_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().filter(|b| !b.accepted).map(|b| b.block)
    }
}

/// Update every shooting point once, in place, for a fixed estimate `x*`.
///
/// `Exact` and `JacobianFree` visit `x_K, x_{K-1}, ..., x_0`, each block
/// seeing the already updated later neighbour and the not yet updated earlier
/// one. The consistency targets `z_k = F_{k-1}(x_{k-1}^old)` are produced on
/// the fly in the same order, so a sweep costs `K` segment evaluations and,
/// in exact mode, `K` segment VJPs, with the tape of at most one segment
/// alive. `FullGradient` steps every block simultaneously along the exact
/// gradient.
///
/// A line search that exhausts its backtracks leaves the block unchanged and
/// is reported, never raised. If an error is returned the trajectory may be
/// partially updated.
pub fn backward_sweep(
    traj: &mut Trajectory,
    x_star: &State,
    field: &VectorField,
    cfg: &SolverConfig,
) -> Result<SweepReport> {
    if x_star.len() != traj.dim() || field.dim() != traj.dim() {
        return Err(Error::contract("sweep dimensions do not match the trajectory"));
    }
    if cfg.segments != traj.segments() {
        return Err(Error::contract(format!(
            "config has {} segments, trajectory {}",
            cfg.segments,
            traj.segments()
        )));
    }
    let w = Weights::from_config(cfg, traj.dim())?;
    let grid = traj.grid.clone();
    let seg = Segments::new(field, &grid, cfg.substeps);
    match cfg.grad_mode {
        GradMode::FullGradient => full_gradient_step(traj, x_star, &seg, &w, cfg),
        GradMode::Exact => gauss_seidel(traj, x_star, &seg, &w, cfg, true),
        GradMode::JacobianFree => gauss_seidel(traj, x_star, &seg, &w, cfg, false),
    }
}

fn gauss_seidel(
    traj: &mut Trajectory,
    x_star: &State,
    seg: &Segments,
    w: &Weights,
    cfg: &SolverConfig,
    exact: bool,
) -> Result<SweepReport> {
    let k_last = traj.segments();
    let search = cfg.line_search;
    // Without a line search no other forward pass happens between computing
    // z_{k+1} and the VJP at x_k, so its tape is kept for that VJP.
    let fused = exact && !search.is_on();
    let mut report = SweepReport::default();
    // z_{k+1} = F_k(x_k^old) and, when fused, its tape.
    let mut z_next: Option<State> = None;
    let mut tape_next: Option<Vec<FieldTape>> = None;

    for k in (0..=k_last).rev() {
        let u = traj.points[k].clone();
        let r = z_next.as_ref().map(|z| &traj.points[k + 1] - z);
        let back = match &r {
            None => None,
            Some(r) if !exact => Some(r.clone()),
            Some(r) => {
                let tapes = match tape_next.take() {
                    Some(t) => t,
                    None => seg.map_taped(k, &u)?.1,
                };
                Some(seg.vjp(k, tapes, r)?)
            }
        };
        let z_k = if k == 0 {
            None
        } else if fused {
            let (z, tapes) = seg.map_taped(k - 1, &traj.points[k - 1])?;
            tape_next = Some(tapes);
            Some(z)
        } else {
            Some(seg.map(k - 1, &traj.points[k - 1])?)
        };

        let mut g = State::zeros(u.len());
        if k == k_last {
            g -= (x_star - &u) * w.alpha;
        }
        if let Some(z) = &z_k {
            g += (&u - z) * w.gamma;
        }
        if let Some(b) = &back {
            g -= b * w.gamma;
        }
        if k == 0 {
            g += w.prior_grad(&u)?;
        }

        let phi = |v: &State| -> Result<f64> {
            let mut p = 0.0;
            if k == k_last {
                p += 0.5 * w.alpha * (x_star - v).norm_squared();
            }
            if let Some(z) = &z_k {
                p += 0.5 * w.gamma * (v - z).norm_squared();
            }
            if k < k_last {
                let fv = seg.map(k, v)?;
                p += 0.5 * w.gamma * (&traj.points[k + 1] - fv).norm_squared();
            }
            if k == 0 {
                p += w.prior_value(v)?;
            }
            Ok(p)
        };
        // phi(u) reuses z_{k+1} = F_k(u) instead of a fresh forward pass.
        let phi_at_u = || -> Result<f64> {
            let mut p = 0.0;
            if k == k_last {
                p += 0.5 * w.alpha * (x_star - &u).norm_squared();
            }
            if let Some(z) = &z_k {
                p += 0.5 * w.gamma * (&u - z).norm_squared();
            }
            if let Some(r) = &r {
                p += 0.5 * w.gamma * r.norm_squared();
            }
            if k == 0 {
                p += w.prior_value(&u)?;
            }
            Ok(p)
        };

        let prev_version = (k > 0).then(|| traj.versions()[k - 1]);
        let next_version = (k < k_last).then(|| traj.versions()[k + 1]);
        let outcome = take_step(&u, &g, cfg.block_step(k), search, phi_at_u, phi)?;
        if !outcome.accepted {
            report.line_search_failures += 1;
        }
        let step_norm = (&outcome.point - &u).norm();
        if !outcome.point.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("block update").in_segment(k));
        }
        report.step_norm_sq += step_norm * step_norm;
        report.blocks.push(BlockUpdate {
            block: k,
            step: outcome.step,
            accepted: outcome.accepted,
            backtracks: outcome.backtracks,
            phi_before: outcome.phi_before,
            phi_after: outcome.phi_after,
            grad_norm_sq: g.norm_squared(),
            step_norm,
            prev_version,
            next_version,
        });
        traj.points[k] = outcome.point;
        traj.bump_version(k);
        z_next = z_k;
    }
    Ok(report)
}

struct StepOutcome {
    point: State,
    step: f64,
    accepted: bool,
    backtracks: usize,
    phi_before: Option<f64>,
    phi_after: Option<f64>,
}

/// Whether a failed trial evaluation should just shrink the step.
fn rejectable(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Singularity { .. })
}

fn take_step(
    u: &State,
    g: &State,
    eta: f64,
    search: LineSearch,
    phi_u: impl FnOnce() -> Result<f64>,
    phi: impl Fn(&State) -> Result<f64>,
) -> Result<StepOutcome> {
    let LineSearch::Armijo {
        c1,
        shrink,
        max_backtracks,
    } = search
    else {
        return Ok(StepOutcome {
            point: u - g * eta,
            step: eta,
            accepted: true,
            backtracks: 0,
            phi_before: None,
            phi_after: None,
        });
    };
    let f0 = phi_u()?;
    let g2 = g.norm_squared();
    if g2 == 0.0 {
        return Ok(StepOutcome {
            point: u.clone(),
            step: 0.0,
            accepted: true,
            backtracks: 0,
            phi_before: Some(f0),
            phi_after: Some(f0),
        });
    }
    let mut t = eta;
    for b in 0..=max_backtracks {
        let trial = u - g * t;
        match phi(&trial) {
            Ok(f) if f.is_finite() && f <= f0 - c1 * t * g2 => {
                return Ok(StepOutcome {
                    point: trial,
                    step: t,
                    accepted: true,
                    backtracks: b,
                    phi_before: Some(f0),
                    phi_after: Some(f),
                });
            }
            Ok(_) => {}
            Err(e) if rejectable(&e) => {}
            Err(e) => return Err(e),
        }
        t *= shrink;
    }
    Ok(StepOutcome {
        point: u.clone(),
        step: 0.0,
        accepted: false,
        backtracks: max_backtracks,
        phi_before: Some(f0),
        phi_after: Some(f0),
    })
}

fn full_gradient_step(
    traj: &mut Trajectory,
    x_star: &State,
    seg: &Segments,
    w: &Weights,
    cfg: &SolverConfig,
) -> Result<SweepReport> {
    let k_last = traj.segments();
    let (j0, g) = value_and_gradient_with(traj, x_star, seg, w)?;
    let etas: Vec<f64> = (0..=k_last).map(|k| cfg.block_step(k)).collect();
    let direction_sq: f64 = g.iter().zip(&etas).map(|(gk, e)| e * gk.norm_squared()).sum();
    let trial = |t: f64| -> Trajectory {
        let mut next = traj.clone();
        for (k, p) in next.points.iter_mut().enumerate() {
            *p -= &g[k] * (t * etas[k]);
        }
        next
    };

    let (next, step, accepted, backtracks, before, after) = match cfg.line_search {
        LineSearch::Off => (trial(1.0), 1.0, true, 0, None, None),
        LineSearch::Armijo {
            c1,
            shrink,
            max_backtracks,
        } => {
            let mut t = 1.0;
            let mut found = None;
            if direction_sq == 0.0 {
                found = Some((traj.clone(), 0.0, 0, j0));
            } else {
                for b in 0..=max_backtracks {
                    let cand = trial(t);
                    match super::trajectory::objective_with(&cand, x_star, seg, w) {
                        Ok(f) if f.is_finite() && f <= j0 - c1 * t * direction_sq => {
                            found = Some((cand, t, b, f));
                            break;
                        }
                        Ok(_) => {}
                        Err(e) if rejectable(&e) => {}
                        Err(e) => return Err(e),
                    }
                    t *= shrink;
                }
            }
            match found {
                Some((cand, t, b, f)) => (cand, t, true, b, Some(j0), Some(f)),
                None => (traj.clone(), 0.0, false, max_backtracks, Some(j0), Some(j0)),
            }
        }
    };

    let mut report = SweepReport::default();
    if !accepted {
        report.line_search_failures = 1;
    }
    for k in (0..=k_last).rev() {
        let step_norm = (&next.points[k] - &traj.points[k]).norm();
        if !next.points[k].iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("block update").in_segment(k));
        }
        report.step_norm_sq += step_norm * step_norm;
        report.blocks.push(BlockUpdate {
            block: k,
            step: step * etas[k],
            accepted,
            backtracks,
            phi_before: before,
            phi_after: after,
            grad_norm_sq: g[k].norm_squared(),
            step_norm,
            prev_version: (k > 0).then(|| traj.versions()[k - 1]),
            next_version: (k < k_last).then(|| traj.versions()[k + 1]),
        });
    }
    for k in 0..=k_last {
        traj.points[k] = next.points[k].clone();
        traj.bump_version(k);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::TimeGrid;
    use crate::net::{Activation, VelocityNet};
    use crate::rng;
    use crate::solver::trajectory::{trajectory_gradient, trajectory_objective};

    fn v(xs: &[f64]) -> State {
        State::from_row_slice(xs)
    }

    fn random_traj(d: usize, k: usize, seed: u64) -> (Trajectory, State) {
        let mut r = rng::seeded(seed);
        let pts = (0..=k).map(|_| rng::standard_normal(&mut r, d) * 0.5).collect();
        let xs = rng::standard_normal(&mut r, d);
        (
            Trajectory::new(pts, TimeGrid::uniform(k).unwrap(), xs.clone()).unwrap(),
            xs,
        )
    }

    fn base(k: usize) -> SolverConfig {
        SolverConfig {
            alpha: 0.5,
            gamma: 1.0,
            lambda: 0.0,
            eta: 0.1,
            segments: k,
            ..Default::default()
        }
    }

    fn net_field(d: usize) -> VectorField {
        VectorField::learned(VelocityNet::new(d, &[12, 12], Activation::Tanh, 3).unwrap())
    }

    #[test]
    fn single_segment_terminal_update_by_hand() {
        let f = VectorField::zero(1);
        let mut t = Trajectory::new(vec![v(&[0.2]), v(&[0.7])], TimeGrid::uniform(1).unwrap(), v(&[1.0])).unwrap();
        let cfg = SolverConfig { segments: 1, ..base(1) };
        let xs = v(&[1.0]);
        backward_sweep(&mut t, &xs, &f, &cfg).unwrap();
        let g1 = -0.5 * (1.0 - 0.7) + 1.0 * (0.7 - 0.2);
        let x1 = 0.7 - 0.1 * g1;
        assert_eq!(t.points[1][0], x1);
        // x_0 sees the new x_1 and the identity Jacobian.
        let x0 = 0.2 - 0.1 * (-(x1 - 0.2));
        assert_eq!(t.points[0][0], x0);
    }

    #[test]
    fn zero_field_exact_and_jacobian_free_agree_bitwise() {
        let f = VectorField::zero(3);
        let (t0, xs) = random_traj(3, 5, 1);
        let mut a = t0.clone();
        let mut b = t0.clone();
        let ce = SolverConfig { grad_mode: GradMode::Exact, ..base(5) };
        let cj = SolverConfig { grad_mode: GradMode::JacobianFree, ..base(5) };
        for _ in 0..3 {
            backward_sweep(&mut a, &xs, &f, &ce).unwrap();
            backward_sweep(&mut b, &xs, &f, &cj).unwrap();
        }
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn exact_blocks_step_along_true_partial_gradient() {
        // Each Gauss-Seidel block update must equal a gradient step on the
        // exact partial derivative at the current mixed iterate.
        let f = net_field(2);
        let (t0, xs) = random_traj(2, 4, 2);
        let cfg = SolverConfig { grad_mode: GradMode::Exact, lambda: 0.01, ..base(4) };
        let mut mixed = t0.clone();
        let mut swept = t0.clone();
        backward_sweep(&mut swept, &xs, &f, &cfg).unwrap();
        for k in (0..=4).rev() {
            let g = trajectory_gradient(&mixed, &xs, &f, &cfg).unwrap();
            mixed.points[k] = &mixed.points[k] - &g[k] * cfg.eta;
            assert!((&mixed.points[k] - &swept.points[k]).amax() < 1e-14, "block {k}");
        }
    }

    #[test]
    fn counts_and_tapes_per_mode() {
        for (mode, k, s, vjps, peak) in [
            (GradMode::Exact, 6, 1, 6, 1),
            (GradMode::Exact, 4, 3, 12, 3),
            (GradMode::JacobianFree, 6, 1, 0, 1),
            (GradMode::JacobianFree, 4, 3, 0, 1),
            (GradMode::FullGradient, 6, 1, 6, 1),
        ] {
            let f = net_field(2);
            let (mut t, xs) = random_traj(2, k, 3);
            let cfg = SolverConfig { grad_mode: mode, substeps: s, ..base(k) };
            backward_sweep(&mut t, &xs, &f, &cfg).unwrap();
            let c = f.counters();
            assert_eq!(c.n_forward(), (k * s) as u64, "{mode:?}");
            assert_eq!(c.n_vjp(), vjps, "{mode:?}");
            assert_eq!(c.peak_live_tapes(), peak, "{mode:?}");
            assert_eq!(c.live_tapes(), 0);
        }
    }

    #[test]
    fn gauss_seidel_version_tags() {
        let f = net_field(2);
        let (mut t, xs) = random_traj(2, 5, 4);
        let cfg = SolverConfig { grad_mode: GradMode::Exact, ..base(5) };
        for sweep in 1..=3u64 {
            let rep = backward_sweep(&mut t, &xs, &f, &cfg).unwrap();
            for b in &rep.blocks {
                if let Some(n) = b.next_version {
                    assert_eq!(n, sweep, "later neighbour already updated");
                }
                if let Some(p) = b.prev_version {
                    assert_eq!(p, sweep - 1, "earlier neighbour still old");
                }
            }
            assert!(t.versions().iter().all(|&x| x == sweep));
        }
    }

    #[test]
    fn armijo_accepts_only_sufficient_decrease() {
        let f = net_field(2);
        let (mut t, xs) = random_traj(2, 6, 5);
        let cfg = SolverConfig {
            grad_mode: GradMode::JacobianFree,
            line_search: LineSearch::armijo(),
            eta: 2.0,
            lambda: 0.01,
            ..base(6)
        };
        let mut j = trajectory_objective(&t, &xs, &f, &cfg).unwrap();
        for _ in 0..20 {
            let rep = backward_sweep(&mut t, &xs, &f, &cfg).unwrap();
            for b in rep.blocks.iter().filter(|b| b.accepted && b.step > 0.0) {
                let (p0, p1) = (b.phi_before.unwrap(), b.phi_after.unwrap());
                assert!(p1 <= p0 - 1e-4 * b.step * b.grad_norm_sq);
            }
            let jn = trajectory_objective(&t, &xs, &f, &cfg).unwrap();
            assert!(jn <= j + 1e-12);
            j = jn;
        }
    }

    #[test]
    fn exhausted_search_keeps_block() {
        // A single backtrack cannot tame a huge step on the terminal block.
        let f = VectorField::zero(1);
        let mut t = Trajectory::new(vec![v(&[0.0]), v(&[0.0])], TimeGrid::uniform(1).unwrap(), v(&[0.0])).unwrap();
        let cfg = SolverConfig {
            segments: 1,
            eta: 1e6,
            line_search: LineSearch::Armijo { c1: 1e-4, shrink: 0.5, max_backtracks: 1 },
            ..base(1)
        };
        let rep = backward_sweep(&mut t, &v(&[1.0]), &f, &cfg).unwrap();
        assert_eq!(rep.blocks[0].block, 1);
        assert!(!rep.blocks[0].accepted);
        assert_eq!(t.points[1][0], 0.0);
        assert_eq!(rep.line_search_failures, 1);
    }

    #[test]
    fn full_gradient_matches_simultaneous_step() {
        let f = net_field(2);
        let (t0, xs) = random_traj(2, 3, 6);
        let cfg = SolverConfig { grad_mode: GradMode::FullGradient, step_sizes: Some(vec![0.1, 0.2, 0.3, 0.4]), ..base(3) };
        let g = trajectory_gradient(&t0, &xs, &f, &cfg).unwrap();
        let mut t = t0.clone();
        backward_sweep(&mut t, &xs, &f, &cfg).unwrap();
        for k in 0..=3 {
            let want = &t0.points[k] - &g[k] * cfg.block_step(k);
            assert!((&t.points[k] - want).amax() < 1e-15);
        }
    }

    #[test]
    fn mismatched_segment_count_is_rejected() {
        let f = VectorField::zero(2);
        let (mut t, xs) = random_traj(2, 3, 7);
        assert!(matches!(backward_sweep(&mut t, &xs, &f, &base(4)), Err(Error::Contract(_))));
    }
}
