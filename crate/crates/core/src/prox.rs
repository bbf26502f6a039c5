//! Latent prior and data-consistency subproblems.
//!
//! The data step of the alternating scheme minimizes
//! `Phi(x) + (alpha / 2) |x - x_K|^2`; this module provides closed-form,
//! proximal and iterative solvers for it depending on the form of `Phi`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::flow::State;
use crate::net::{Activation, ActivationTape, Layer, Mlp};
use crate::operators::{LinearOperator, Observation};

/// Below this norm the radial prior is treated as singular.
pub const RADIAL_GUARD: f64 = 1e-8;

/// Negative log-density of the radius of a standard Gaussian in `R^d`,
/// `R(x) = |x|^2 / 2 - (d - 1) log |x|`, up to a constant.
///
/// It is minimized on the sphere `|x| = sqrt(d - 1)`, where Gaussian
/// samples concentrate, rather than at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialPrior {
    dim: usize,
    weight: f64,
}

impl RadialPrior {
    pub fn new(dim: usize, weight: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::contract("radial prior needs dimension >= 2"));
        }
        if !(weight >= 0.0) {
            return Err(Error::contract("prior weight must be non-negative"));
        }
        Ok(RadialPrior { dim, weight })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn radius(&self, x: &State) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "prior has dimension {}, got {}",
                self.dim,
                x.len()
            )));
        }
        let r = x.norm();
        if r <= RADIAL_GUARD {
            return Err(Error::Singularity { norm: r });
        }
        Ok(r)
    }

    /// Unweighted `R(x)`.
    pub fn value(&self, x: &State) -> Result<f64> {
        let r = self.radius(x)?;
        Ok(0.5 * r * r - (self.dim as f64 - 1.0) * r.ln())
    }

    /// Unweighted `grad R(x) = x - (d - 1) x / |x|^2`.
    pub fn grad(&self, x: &State) -> Result<State> {
        let r = self.radius(x)?;
        Ok(x * (1.0 - (self.dim as f64 - 1.0) / (r * r)))
    }

    /// `lambda R(x)`; exactly zero when the weight is zero.
    pub fn weighted_value(&self, x: &State) -> Result<f64> {
        if self.weight == 0.0 {
            return Ok(0.0);
        }
        Ok(self.weight * self.value(x)?)
    }

    pub fn weighted_grad(&self, x: &State) -> Result<State> {
        if self.weight == 0.0 {
            return Ok(State::zeros(x.len()));
        }
        Ok(self.grad(x)? * self.weight)
    }
}

/// Deterministic latent-to-pixel map `D: R^{d_z} -> R^{d_x}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder {
    mlp: Mlp,
}

impl ToyDecoder {
    pub fn new(latent_dim: usize, hidden: &[usize], pixel_dim: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(pixel_dim);
        Ok(ToyDecoder {
            mlp: Mlp::new(&widths, Activation::Tanh, seed)?,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let layer = Layer {
            weight: DMatrix::identity(dim, dim),
            bias: State::zeros(dim),
        };
        ToyDecoder {
            mlp: Mlp::from_layers(vec![layer], Activation::Identity).unwrap(),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        ToyDecoder { mlp }
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn pixel_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn counters(&self) -> &Arc<OpCounters> {
        self.mlp.counters()
    }

    pub fn forward(&self, z: &State) -> Result<(State, ActivationTape)> {
        self.mlp.forward(z)
    }

    pub fn decode(&self, z: &State) -> Result<State> {
        self.mlp.eval(z)
    }

    pub fn vjp(&self, tape: &ActivationTape, w: &State) -> Result<State> {
        self.mlp.vjp_input(tape, w)
    }
}

/// The data-consistency term `Phi`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataFit {
    /// `|A x - y|^2 / 2`.
    Quadratic { operator: LinearOperator, y: State },
    /// `|x - y|_1`, identity operator only.
    OneNorm { y: State },
    /// `|A D(z) - y|^2 / 2` for a latent code `z`.
    Latent {
        operator: LinearOperator,
        y: State,
        decoder: ToyDecoder,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Quadratic,
    OneNorm,
    Latent,
}

impl DataFit {
    pub fn quadratic(obs: &Observation) -> Self {
        DataFit::Quadratic {
            operator: obs.operator.clone(),
            y: obs.y.clone(),
        }
    }

    pub fn one_norm(obs: &Observation) -> Result<Self> {
        if !obs.operator.is_identity() {
            return Err(Error::Unsupported(
                "the one-norm fit is only available with the identity operator".into(),
            ));
        }
        Ok(DataFit::OneNorm { y: obs.y.clone() })
    }

    pub fn latent(obs: &Observation, decoder: ToyDecoder) -> Result<Self> {
        if decoder.pixel_dim() != obs.operator.cols() {
            return Err(Error::contract(format!(
                "decoder emits dimension {}, operator expects {}",
                decoder.pixel_dim(),
                obs.operator.cols()
            )));
        }
        Ok(DataFit::Latent {
            operator: obs.operator.clone(),
            y: obs.y.clone(),
            decoder,
        })
    }

    pub fn kind(&self) -> FitKind {
        match self {
            DataFit::Quadratic { .. } => FitKind::Quadratic,
            DataFit::OneNorm { .. } => FitKind::OneNorm,
            DataFit::Latent { .. } => FitKind::Latent,
        }
    }

    /// Dimension of the variable `Phi` is evaluated on.
    pub fn state_dim(&self) -> usize {
        match self {
            DataFit::Quadratic { operator, .. } => operator.cols(),
            DataFit::OneNorm { y } => y.len(),
            DataFit::Latent { decoder, .. } => decoder.latent_dim(),
        }
    }

    /// Maps the optimization variable to signal space (decodes latents).
    pub fn reconstruct(&self, x: &State) -> Result<State> {
        match self {
            DataFit::Latent { decoder, .. } => decoder.decode(x),
            _ => Ok(x.clone()),
        }
    }

    /// `A rec(x) - y`.
    pub fn residual(&self, x: &State) -> Result<State> {
        match self {
            DataFit::Quadratic { operator, y } => Ok(operator.apply(x)? - y),
            DataFit::OneNorm { y } => Ok(x - y),
            DataFit::Latent { operator, y, decoder } => Ok(operator.apply(&decoder.decode(x)?)? - y),
        }
    }

    pub fn value(&self, x: &State) -> Result<f64> {
        let r = self.residual(x)?;
        Ok(match self {
            DataFit::OneNorm { .. } => r.abs().sum(),
            _ => 0.5 * r.norm_squared(),
        })
    }

    /// Gradient of `Phi`; the sign vector for the one-norm.
    pub fn gradient(&self, x: &State) -> Result<State> {
        match self {
            DataFit::Quadratic { operator, y } => operator.apply_adjoint(&(operator.apply(x)? - y)),
            DataFit::OneNorm { y } => Ok((x - y).map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })),
            DataFit::Latent { operator, y, decoder } => {
                let (img, tape) = decoder.forward(x)?;
                let w = operator.apply_adjoint(&(operator.apply(&img)? - y))?;
                decoder.vjp(&tape, &w)
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("coupling weight alpha must be positive, got {alpha}")))
    }
}

/// Largest system solved with a dense Cholesky factorization.
pub const DIRECT_SOLVE_MAX: usize = 4096;
const CG_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearSolve {
    /// Direct up to [`DIRECT_SOLVE_MAX`], conjugate gradient above.
    Auto,
    Direct,
    ConjugateGradient,
}

/// `argmin_x |A x - y|^2 / 2 + (alpha / 2) |x - x_K|^2
///  = (A^T A + alpha I)^{-1} (A^T y + alpha x_K)`.
pub fn prox_quadratic(fit: &DataFit, x_k: &State, alpha: f64) -> Result<State> {
    prox_quadratic_with(fit, x_k, alpha, LinearSolve::Auto)
}

pub fn prox_quadratic_with(fit: &DataFit, x_k: &State, alpha: f64, method: LinearSolve) -> Result<State> {
    check_alpha(alpha)?;
    let DataFit::Quadratic { operator, y } = fit else {
        return Err(Error::Unsupported("closed-form prox needs a quadratic fit".into()));
    };
    if x_k.len() != operator.cols() {
        return Err(Error::contract("prox point dimension does not match the operator"));
    }
    let rhs = operator.apply_adjoint(y)? + x_k * alpha;
    let n = x_k.len();
    let direct = match method {
        LinearSolve::Auto => n <= DIRECT_SOLVE_MAX,
        LinearSolve::Direct => true,
        LinearSolve::ConjugateGradient => false,
    };
    if direct {
        let a = operator.to_dense();
        let mut system = a.tr_mul(&a);
        for i in 0..n {
            system[(i, i)] += alpha;
        }
        let chol = system
            .clone()
            .cholesky()
            .ok_or_else(|| Error::non_finite("normal equations are not positive definite"))?;
        let mut x = chol.solve(&rhs);
        // one refinement pass recovers the last digits on poorly scaled systems
        let r = &rhs - &system * &x;
        x += chol.solve(&r);
        Ok(x)
    } else {
        conjugate_gradient(|v| Ok(operator.normal_apply(v)? + v * alpha), &rhs, x_k.clone(), CG_TOL, 10 * n.max(10))
    }
}

/// Solves `M x = b` for symmetric positive definite `M` given as a product.
pub fn conjugate_gradient(
    apply: impl Fn(&State) -> Result<State>,
    b: &State,
    mut x: State,
    rel_tol: f64,
    max_iter: usize,
) -> Result<State> {
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(State::zeros(b.len()));
    }
    let mut r = b - apply(&x)?;
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    for _ in 0..max_iter {
        if rs.sqrt() <= rel_tol * b_norm {
            return Ok(x);
        }
        let ap = apply(&p)?;
        let step = rs / p.dot(&ap);
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_new = r.norm_squared();
        p = &r + p * (rs_new / rs);
        rs = rs_new;
    }
    let residual = (b - apply(&x)?).norm() / b_norm;
    if residual <= rel_tol {
        Ok(x)
    } else {
        Err(Error::SolverDiverged {
            residual,
            iterations: max_iter,
        })
    }
}

/// `argmin_x |x - y|_1 + (alpha / 2) |x - x_K|^2`: shrink `x_K` toward `y`
/// by `1 / alpha`, stopping at `y`.
pub fn prox_one_norm(fit: &DataFit, x_k: &State, alpha: f64) -> Result<State> {
    check_alpha(alpha)?;
    let DataFit::OneNorm { y } = fit else {
        return Err(Error::Unsupported(
            "one-norm prox needs a one-norm fit with the identity operator".into(),
        ));
    };
    if x_k.len() != y.len() {
        return Err(Error::contract("prox point dimension does not match the data"));
    }
    let tau = 1.0 / alpha;
    Ok(State::from_fn(y.len(), |i, _| {
        let d = x_k[i] - y[i];
        y[i] + d.signum() * (d.abs() - tau).max(0.0)
    }))
}

/// `Phi(z) + (alpha / 2) |z - z_K|^2`.
pub fn coupled_objective(fit: &DataFit, z: &State, z_k: &State, alpha: f64) -> Result<f64> {
    Ok(fit.value(z)? + 0.5 * alpha * (z - z_k).norm_squared())
}

pub fn coupled_gradient(fit: &DataFit, z: &State, z_k: &State, alpha: f64) -> Result<State> {
    Ok(fit.gradient(z)? + (z - z_k) * alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerSchedule {
    pub steps: usize,
    pub step_size: f64,
    /// Backtrack (halving, `c1 = 1e-4`, at most 30 times) until the
    /// objective decreases sufficiently.
    pub armijo: bool,
}

impl Default for InnerSchedule {
    fn default() -> Self {
        InnerSchedule {
            steps: 20,
            step_size: 0.5,
            armijo: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterativeUpdate {
    pub z: State,
    /// Objective at the start and after every step.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const ARMIJO_MAX_BACKTRACKS: usize = 30;

/// Fixed-count gradient descent on the coupled objective, started at `z_K`.
pub fn data_update_iterative(
    fit: &DataFit,
    z_k: &State,
    alpha: f64,
    inner: &InnerSchedule,
) -> Result<IterativeUpdate> {
    check_alpha(alpha)?;
    if matches!(fit, DataFit::OneNorm { .. }) {
        return Err(Error::Unsupported("use prox_one_norm for the one-norm fit".into()));
    }
    let mut z = z_k.clone();
    let mut f = coupled_objective(fit, &z, z_k, alpha)?;
    if !f.is_finite() {
        return Err(Error::non_finite("data-consistency objective"));
    }
    let mut trace = vec![f];
    for _ in 0..inner.steps {
        let g = coupled_gradient(fit, &z, z_k, alpha)?;
        let g2 = g.norm_squared();
        if g2 == 0.0 {
            trace.push(f);
            continue;
        }
        let mut step = inner.step_size;
        let mut accepted = None;
        for _ in 0..=ARMIJO_MAX_BACKTRACKS {
            let trial = &z - &g * step;
            let ft = coupled_objective(fit, &trial, z_k, alpha)?;
            if !inner.armijo {
                if !ft.is_finite() {
                    return Err(Error::non_finite("data-consistency objective"));
                }
                accepted = Some((trial, ft));
                break;
            }
            if ft.is_finite() && ft <= f - ARMIJO_C1 * step * g2 {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        if let Some((zn, fnew)) = accepted {
            z = zn;
            f = fnew;
        }
        trace.push(f);
    }
    Ok(IterativeUpdate { z, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::make_observation;
    use crate::rng;

    fn v(xs: &[f64]) -> State {
        State::from_row_slice(xs)
    }

    fn obs(op: LinearOperator, y: State) -> Observation {
        Observation {
            operator: op,
            y,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn radial_examples() {
        let p = RadialPrior::new(2, 1.0).unwrap();
        assert_eq!(p.value(&v(&[1.0, 0.0])).unwrap(), 0.5);
        assert_eq!(p.grad(&v(&[1.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
        let p = RadialPrior::new(4, 1.0).unwrap();
        assert_eq!(p.grad(&v(&[2.0, 0.0, 0.0, 0.0])).unwrap(), v(&[0.5, 0.0, 0.0, 0.0]));
        assert!(matches!(p.value(&State::zeros(4)), Err(Error::Singularity { .. })));
        assert!(RadialPrior::new(1, 1.0).is_err());
    }

    #[test]
    fn radial_gradient_matches_finite_differences() {
        let p = RadialPrior::new(16, 1.0).unwrap();
        let mut r = rng::seeded(3);
        let x = rng::standard_normal(&mut r, 16);
        let g = p.grad(&x).unwrap();
        let eps = 1e-6;
        for i in 0..16 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (p.value(&xp).unwrap() - p.value(&xm).unwrap()) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-7 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn radial_gradient_sign_flips_across_sphere() {
        let p = RadialPrior::new(9, 1.0).unwrap();
        let dir = v(&[1.0, -2.0, 0.5, 0.0, 1.0, 3.0, -1.0, 0.2, 0.7]).normalize();
        let inside = &dir * 2.0;
        let outside = &dir * 4.0;
        assert!(p.grad(&inside).unwrap().dot(&inside) < 0.0);
        assert!(p.grad(&outside).unwrap().dot(&outside) > 0.0);
        assert!(p.grad(&(&dir * 8f64.sqrt())).unwrap().norm() < 1e-12);
    }

    #[test]
    fn prox_quadratic_examples() {
        let fit = DataFit::quadratic(&obs(LinearOperator::identity(1), v(&[2.0])));
        assert!((prox_quadratic(&fit, &v(&[0.0]), 1.0).unwrap()[0] - 1.0).abs() < 1e-15);
        let zero = LinearOperator::dense(DMatrix::zeros(2, 3)).unwrap();
        let fit = DataFit::quadratic(&obs(zero, v(&[5.0, -1.0])));
        let xk = v(&[0.3, 0.2, -0.1]);
        assert!((prox_quadratic(&fit, &xk, 0.7).unwrap() - &xk).amax() < 1e-15);
        assert!(matches!(prox_quadratic(&fit, &xk, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn prox_quadratic_matches_explicit_inverse() {
        let mut r = rng::seeded(17);
        let a = DMatrix::from_fn(8, 8, |_, _| rng::standard_normal(&mut r, 1)[0]);
        let y = rng::standard_normal(&mut r, 8);
        let xk = rng::standard_normal(&mut r, 8);
        let alpha = 0.3;
        let fit = DataFit::quadratic(&obs(LinearOperator::dense(a.clone()).unwrap(), y.clone()));
        let inv = (a.transpose() * &a + DMatrix::identity(8, 8) * alpha).try_inverse().unwrap();
        let oracle = inv * (a.transpose() * &y + &xk * alpha);
        for method in [LinearSolve::Direct, LinearSolve::ConjugateGradient] {
            let x = prox_quadratic_with(&fit, &xk, alpha, method).unwrap();
            assert!((x - &oracle).amax() <= 1e-10, "{method:?}");
        }
    }

    #[test]
    fn prox_one_norm_examples() {
        let fit = DataFit::one_norm(&obs(LinearOperator::identity(1), v(&[0.0]))).unwrap();
        assert_eq!(prox_one_norm(&fit, &v(&[2.0]), 1.0).unwrap(), v(&[1.0]));
        let fit = DataFit::one_norm(&obs(LinearOperator::identity(3), v(&[1.0, -1.0, 0.5]))).unwrap();
        let xk = v(&[1.4, -0.7, 0.0]);
        assert_eq!(prox_one_norm(&fit, &xk, 2.0).unwrap(), v(&[1.0, -1.0, 0.5]));
        let mask = obs(LinearOperator::mask(2, vec![0]).unwrap(), v(&[1.0]));
        assert!(matches!(DataFit::one_norm(&mask), Err(Error::Unsupported(_))));
        let quad = DataFit::quadratic(&mask);
        assert!(matches!(prox_one_norm(&quad, &v(&[0.0, 0.0]), 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn iterative_update_trivial_cases() {
        let fit = DataFit::quadratic(&obs(LinearOperator::identity(2), v(&[1.0, 2.0])));
        let zk = v(&[0.0, 0.0]);
        let none = InnerSchedule { steps: 0, ..Default::default() };
        assert_eq!(data_update_iterative(&fit, &zk, 1.0, &none).unwrap().z, zk);
        let zero = LinearOperator::dense(DMatrix::zeros(2, 2)).unwrap();
        let fit = DataFit::quadratic(&obs(zero, v(&[1.0, 2.0])));
        let zk = v(&[0.4, -0.3]);
        let out = data_update_iterative(&fit, &zk, 1.0, &InnerSchedule::default()).unwrap();
        assert_eq!(out.z, zk);
    }

    #[test]
    fn identity_decoder_converges_to_closed_form() {
        let mut r = rng::seeded(8);
        let y = rng::standard_normal(&mut r, 4);
        let zk = rng::standard_normal(&mut r, 4);
        let o = obs(LinearOperator::identity(4), y);
        let latent = DataFit::latent(&o, ToyDecoder::identity(4)).unwrap();
        let closed = prox_quadratic(&DataFit::quadratic(&o), &zk, 0.5).unwrap();
        let sched = InnerSchedule { steps: 200, step_size: 0.5, armijo: true };
        let out = data_update_iterative(&latent, &zk, 0.5, &sched).unwrap();
        assert!((out.z - closed).norm() < 1e-6);
    }

    #[test]
    fn iterative_update_is_monotone_with_armijo() {
        let dec = ToyDecoder::new(3, &[16], 6, 4).unwrap();
        let x_true = dec.decode(&v(&[0.5, -1.0, 0.3])).unwrap();
        let op = LinearOperator::mask(6, vec![0, 2, 3, 5]).unwrap();
        let o = make_observation(&op, &x_true, 0.01, 2).unwrap();
        let fit = DataFit::latent(&o, dec).unwrap();
        let zk = v(&[0.0, 0.0, 0.0]);
        let sched = InnerSchedule { steps: 50, step_size: 5.0, armijo: true };
        let out = data_update_iterative(&fit, &zk, 0.1, &sched).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.trace.last().unwrap() < &out.trace[0]);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let dec = ToyDecoder::new(3, &[10], 5, 12).unwrap();
        let op = LinearOperator::blur(5, 1, 1.0, 3).unwrap();
        let o = obs(op, v(&[0.1, -0.2, 0.4, 0.0, 0.3]));
        let fit = DataFit::latent(&o, dec).unwrap();
        let z = v(&[0.2, -0.6, 0.9]);
        let zk = v(&[0.0, 0.1, 0.2]);
        let g = coupled_gradient(&fit, &z, &zk, 0.3).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut zp = z.clone();
            zp[i] += eps;
            let mut zm = z.clone();
            zm[i] -= eps;
            let fd = (coupled_objective(&fit, &zp, &zk, 0.3).unwrap()
                - coupled_objective(&fit, &zm, &zk, 0.3).unwrap())
                / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3));
        }
    }
}
