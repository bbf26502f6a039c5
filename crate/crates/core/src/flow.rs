//! Vector fields and explicit-Euler integration of the flow ODE.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::counters::{LiveTape, OpCounters};
use crate::error::{Error, Result};
use crate::net::{ActivationTape, VelocityNet};
use crate::rng;

pub type State = DVector<f64>;

/// Grid `0 = t_0 < t_1 < ... < t_K = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(segments: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::contract("time grid needs at least one segment"));
        }
        let k = segments as f64;
        let mut nodes: Vec<f64> = (0..=segments).map(|i| i as f64 / k).collect();
        nodes[segments] = 1.0;
        Ok(TimeGrid { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::contract("time grid needs at least two nodes"));
        }
        if nodes[0] != 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(Error::contract("time grid must start at 0 and end at 1"));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::contract("time grid nodes must be strictly increasing"));
        }
        Ok(TimeGrid { nodes })
    }

    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// `t_{k+1} - t_k`.
    pub fn delta(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }
}

#[derive(Clone, Debug)]
pub enum FieldKind {
    Learned(VelocityNet),
    Zero { dim: usize },
    /// `v(x, t) = M x`.
    Linear { matrix: DMatrix<f64> },
    /// `v_i(x, t) = a sin(x_i + t)`, Lipschitz constant `|a|`.
    Sinusoidal { dim: usize, amplitude: f64 },
}

/// A velocity field `v(x, t)`, either a trained network or a closed form.
///
/// Analytic fields declare a Lipschitz constant in `x` for sensitivity
/// checks. All evaluations are charged to [`VectorField::counters`]; a clone
/// is charged to its own, fresh counters.
#[derive(Debug)]
pub struct VectorField {
    kind: FieldKind,
    lipschitz: Option<f64>,
    counters: Arc<OpCounters>,
}

/// Activations retained by one field evaluation, needed for its VJP.
#[derive(Debug)]
pub enum FieldTape {
    Net(ActivationTape),
    Analytic(AnalyticTape),
}

/// Evaluation point of an analytic field; its Jacobian is closed form.
#[derive(Debug)]
pub struct AnalyticTape {
    x: State,
    t: f64,
    live: LiveTape,
}

impl Clone for VectorField {
    fn clone(&self) -> Self {
        match &self.kind {
            FieldKind::Learned(net) => VectorField::learned(net.clone()),
            kind => VectorField {
                kind: kind.clone(),
                lipschitz: self.lipschitz,
                counters: OpCounters::new(),
            },
        }
    }
}

impl VectorField {
    pub fn learned(net: VelocityNet) -> Self {
        let counters = Arc::clone(net.counters());
        VectorField {
            kind: FieldKind::Learned(net),
            lipschitz: None,
            counters,
        }
    }

    pub fn zero(dim: usize) -> Self {
        VectorField {
            kind: FieldKind::Zero { dim },
            lipschitz: Some(0.0),
            counters: OpCounters::new(),
        }
    }

    /// Linear field with its spectral norm as the declared Lipschitz constant.
    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::contract("linear field needs a non-empty square matrix"));
        }
        let l = matrix.clone().svd(false, false).singular_values.max();
        Ok(VectorField {
            kind: FieldKind::Linear { matrix },
            lipschitz: Some(l),
            counters: OpCounters::new(),
        })
    }

    /// `v = [[0, -1], [1, 0]] x`: norm-preserving, Lipschitz constant 1.
    pub fn rotation() -> Self {
        Self::linear(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).unwrap()
    }

    pub fn sinusoidal(dim: usize, amplitude: f64) -> Self {
        VectorField {
            kind: FieldKind::Sinusoidal { dim, amplitude },
            lipschitz: Some(amplitude.abs()),
            counters: OpCounters::new(),
        }
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn net(&self) -> Option<&VelocityNet> {
        match &self.kind {
            FieldKind::Learned(n) => Some(n),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            FieldKind::Learned(n) => n.dim(),
            FieldKind::Zero { dim } | FieldKind::Sinusoidal { dim, .. } => *dim,
            FieldKind::Linear { matrix } => matrix.nrows(),
        }
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn counters(&self) -> &Arc<OpCounters> {
        &self.counters
    }

    pub fn forward(&self, x: &State, t: f64) -> Result<(State, FieldTape)> {
        if let FieldKind::Learned(net) = &self.kind {
            let (v, tape) = net.forward(x, t)?;
            return Ok((v, FieldTape::Net(tape)));
        }
        if x.len() != self.dim() {
            return Err(Error::contract(format!(
                "state has dimension {}, field expects {}",
                x.len(),
                self.dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("field input"));
        }
        self.counters.charge_forward();
        let live = LiveTape::register(&self.counters);
        let v = match &self.kind {
            FieldKind::Zero { dim } => State::zeros(*dim),
            FieldKind::Linear { matrix } => matrix * x,
            FieldKind::Sinusoidal { amplitude, .. } => x.map(|xi| amplitude * (xi + t).sin()),
            FieldKind::Learned(_) => unreachable!(),
        };
        Ok((
            v,
            FieldTape::Analytic(AnalyticTape {
                x: x.clone(),
                t,
                live,
            }),
        ))
    }

    /// Forward evaluation with activations released immediately.
    pub fn eval(&self, x: &State, t: f64) -> Result<State> {
        self.forward(x, t).map(|(v, _)| v)
    }

    /// `J_x v(x, t)^T w` at the point recorded in `tape`.
    pub fn vjp(&self, tape: &FieldTape, w: &State) -> Result<State> {
        match (&self.kind, tape) {
            (FieldKind::Learned(net), FieldTape::Net(tape)) => net.vjp_input(tape, w),
            (FieldKind::Learned(_), _) | (_, FieldTape::Net(_)) => {
                Err(Error::contract("tape does not belong to this field"))
            }
            (kind, FieldTape::Analytic(AnalyticTape { x, t, live })) => {
                if !Arc::ptr_eq(live.owner(), &self.counters) {
                    return Err(Error::contract("tape does not belong to this field"));
                }
                if w.len() != self.dim() {
                    return Err(Error::contract("cotangent dimension mismatch"));
                }
                self.counters.charge_vjp();
                Ok(match kind {
                    FieldKind::Zero { dim } => State::zeros(*dim),
                    FieldKind::Linear { matrix } => matrix.tr_mul(w),
                    FieldKind::Sinusoidal { amplitude, .. } => {
                        State::from_fn(w.len(), |i, _| amplitude * (x[i] + t).cos() * w[i])
                    }
                    FieldKind::Learned(_) => unreachable!(),
                })
            }
        }
    }
}

fn check_finite(x: &State, context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context))
    }
}

/// `x + dt * v(x, t)`; one forward evaluation.
pub fn euler_step(field: &VectorField, x: &State, t: f64, dt: f64) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("Euler step needs dt > 0, got {dt}")));
    }
    let v = field.eval(x, t)?;
    let out = x + v * dt;
    check_finite(&out, "Euler step")?;
    Ok(out)
}

/// All states `x(t_0), ..., x(t_K)`, one Euler step per segment.
pub fn integrate(field: &VectorField, x0: &State, grid: &TimeGrid) -> Result<Vec<State>> {
    let mut states = Vec::with_capacity(grid.segments() + 1);
    states.push(x0.clone());
    for k in 0..grid.segments() {
        let next = euler_step(field, &states[k], grid.node(k), grid.delta(k))
            .map_err(|e| e.in_segment(k))?;
        states.push(next);
    }
    Ok(states)
}

/// Integrates from `t = 1` back to `t = 0` with negated Euler steps,
/// `w_k = w_{k+1} - dt_k v(w_{k+1}, t_{k+1})`.
pub fn integrate_backward(field: &VectorField, x1: &State, grid: &TimeGrid) -> Result<State> {
    let mut w = x1.clone();
    for k in (0..grid.segments()).rev() {
        let v = field.eval(&w, grid.node(k + 1)).map_err(|e| e.in_segment(k))?;
        w -= v * grid.delta(k);
        check_finite(&w, "backward Euler step").map_err(|e| e.in_segment(k))?;
    }
    Ok(w)
}

/// Draws `n` base points from `N(0, I)` and pushes each to `t = 1`.
pub fn sample(field: &VectorField, n: usize, grid: &TimeGrid, seed: u64) -> Result<Vec<State>> {
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let x0 = rng::standard_normal(&mut rng, field.dim());
            let mut states = integrate(field, &x0, grid)?;
            Ok(states.pop().unwrap())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GronwallCheck {
    /// `|x(t; x1) - x(t; x2)| / |x1 - x2|` measured on the grid.
    pub ratio: f64,
    /// `exp(L t)`.
    pub bound: f64,
}

/// Measures how much the flow map on `[0, horizon]` amplifies the distance
/// between two starting points, using `steps` uniform Euler steps.
pub fn gronwall_check(
    field: &VectorField,
    x1: &State,
    x2: &State,
    horizon: f64,
    steps: usize,
) -> Result<GronwallCheck> {
    let l = field
        .lipschitz()
        .ok_or_else(|| Error::contract("Gronwall check needs a field with declared Lipschitz constant"))?;
    let d0 = (x1 - x2).norm();
    if d0 == 0.0 {
        return Err(Error::contract("starting points coincide; amplification undefined"));
    }
    if steps == 0 || !(horizon > 0.0) {
        return Err(Error::contract("Gronwall check needs steps > 0 and horizon > 0"));
    }
    let dt = horizon / steps as f64;
    let (mut a, mut b) = (x1.clone(), x2.clone());
    for s in 0..steps {
        let t = s as f64 * dt;
        a = euler_step(field, &a, t, dt).map_err(|e| e.in_segment(s))?;
        b = euler_step(field, &b, t, dt).map_err(|e| e.in_segment(s))?;
    }
    Ok(GronwallCheck {
        ratio: (a - b).norm() / d0,
        bound: (l * horizon).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> State {
        State::from_row_slice(xs)
    }

    #[test]
    fn uniform_grid_sums_to_one() {
        for k in [1, 3, 7, 100, 6400] {
            let g = TimeGrid::uniform(k).unwrap();
            let s: f64 = (0..k).map(|i| g.delta(i)).sum();
            assert!((s - 1.0).abs() <= 1e-15 * k as f64, "{k}: {s}");
            assert_eq!(g.node(k), 1.0);
        }
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.9]).is_err());
    }

    #[test]
    fn euler_step_examples() {
        let x = v(&[1.0, 0.0]);
        assert_eq!(euler_step(&VectorField::zero(2), &x, 0.2, 0.5).unwrap(), x);
        let id = VectorField::linear(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(euler_step(&id, &x, 0.0, 0.5).unwrap(), v(&[1.5, 0.0]));
        assert!(matches!(euler_step(&id, &x, 0.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn euler_step_with_net_matches_direct_formula() {
        let net = VelocityNet::new(2, &[8], Activation::Tanh, 4).unwrap();
        let f = VectorField::learned(net.clone());
        let x = v(&[0.2, -0.7]);
        let direct = &x + net.forward(&x, 0.3).unwrap().0 * 0.25;
        assert_eq!(euler_step(&f, &x, 0.3, 0.25).unwrap(), direct);
        assert_eq!(f.counters().n_forward(), 1);
    }

    #[test]
    fn linear_field_compounds_exactly() {
        let f = VectorField::linear(DMatrix::identity(2, 2)).unwrap();
        let x0 = v(&[1.0, -2.0]);
        for k in [1usize, 2, 4, 8] {
            let states = integrate(&f, &x0, &TimeGrid::uniform(k).unwrap()).unwrap();
            let factor = (1.0 + 1.0 / k as f64).powi(k as i32);
            assert!((states[k].clone() - &x0 * factor).amax() <= 1e-14);
        }
    }

    #[test]
    fn zero_field_keeps_state() {
        let x0 = v(&[0.3, 0.1, -0.2]);
        let states = integrate(&VectorField::zero(3), &x0, &TimeGrid::uniform(5).unwrap()).unwrap();
        assert!(states.iter().all(|s| *s == x0));
        let samples = sample(&VectorField::zero(3), 4, &TimeGrid::uniform(5).unwrap(), 8).unwrap();
        let mut r = rng::seeded(8);
        for s in samples {
            assert_eq!(s, rng::standard_normal(&mut r, 3));
        }
        assert!(sample(&VectorField::zero(3), 0, &TimeGrid::uniform(5).unwrap(), 8)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn integrate_is_composed_euler_steps() {
        let f = VectorField::learned(VelocityNet::new(2, &[8, 8], Activation::Tanh, 5).unwrap());
        let grid = TimeGrid::from_nodes(vec![0.0, 0.1, 0.35, 0.6, 1.0]).unwrap();
        let x0 = v(&[0.5, -0.5]);
        let states = integrate(&f, &x0, &grid).unwrap();
        let mut x = x0;
        for k in 0..4 {
            x = euler_step(&f, &x, grid.node(k), grid.delta(k)).unwrap();
            assert_eq!(states[k + 1], x);
        }
    }

    #[test]
    fn first_order_convergence_on_sinusoidal_field() {
        let f = VectorField::sinusoidal(2, 1.5);
        let x0 = v(&[0.4, -1.0]);
        let end = |k| integrate(&f, &x0, &TimeGrid::uniform(k).unwrap()).unwrap().pop().unwrap();
        for k in [25usize, 50, 100] {
            let reference = end(64 * 2 * k);
            let e1 = (end(k) - &reference).norm();
            let e2 = (end(2 * k) - &reference).norm();
            let ratio = e1 / e2;
            assert!((ratio - 2.0).abs() <= 0.5, "K={k}: ratio {ratio}");
        }
    }

    #[test]
    fn nonfinite_step_names_segment() {
        let f = VectorField::linear(DMatrix::identity(1, 1) * 1e308).unwrap();
        let err = integrate(&f, &v(&[10.0]), &TimeGrid::uniform(3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { segment: Some(0), .. }), "{err:?}");
    }

    #[test]
    fn gronwall_linear_is_equality_case() {
        let f = VectorField::linear(DMatrix::identity(1, 1)).unwrap();
        let c = gronwall_check(&f, &v(&[1.0]), &v(&[0.0]), 1.0, 1000).unwrap();
        assert!((c.bound - std::f64::consts::E).abs() < 1e-15);
        assert!(c.ratio <= c.bound);
        assert!(c.ratio >= 0.99 * c.bound);
    }

    #[test]
    fn gronwall_rotation_preserves_distance_to_first_order() {
        let c = gronwall_check(&VectorField::rotation(), &v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 1.0, 1000)
            .unwrap();
        // explicit Euler inflates the norm by (1 + dt^2)^(steps/2)
        assert!((c.ratio - 1.0).abs() < 1e-3, "{}", c.ratio);
        assert!(c.ratio <= c.bound);
    }

    #[test]
    fn gronwall_rejects_identical_points() {
        let x = v(&[1.0, 2.0]);
        assert!(matches!(
            gronwall_check(&VectorField::zero(2), &x, &x, 1.0, 10),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_integration_inverts_zero_and_reverses_linear() {
        let grid = TimeGrid::uniform(4).unwrap();
        let x = v(&[0.5, 0.25]);
        assert_eq!(integrate_backward(&VectorField::zero(2), &x, &grid).unwrap(), x);
        let f = VectorField::linear(DMatrix::identity(2, 2)).unwrap();
        let back = integrate_backward(&f, &x, &grid).unwrap();
        assert!((back - &x * 0.75f64.powi(4)).amax() < 1e-15);
    }

    #[test]
    fn analytic_vjp_matches_transpose() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let f = VectorField::linear(m.clone()).unwrap();
        let (_, tape) = f.forward(&v(&[0.3, 0.2]), 0.1).unwrap();
        let w = v(&[1.0, -1.0]);
        assert_eq!(f.vjp(&tape, &w).unwrap(), m.transpose() * &w);
        let other = VectorField::rotation();
        assert!(other.vjp(&tape, &w).is_err());
    }

    proptest! {
        #[test]
        fn sampling_is_deterministic(seed in 0u64..10_000) {
            let f = VectorField::sinusoidal(3, 0.7);
            let g = TimeGrid::uniform(6).unwrap();
            prop_assert_eq!(sample(&f, 5, &g, seed).unwrap(), sample(&f, 5, &g, seed).unwrap());
        }

        #[test]
        fn gronwall_bound_holds_for_sinusoidal(
            a in -2.0f64..2.0,
            x1 in proptest::collection::vec(-3.0f64..3.0, 3),
            x2 in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let x1 = State::from_vec(x1);
            let x2 = State::from_vec(x2);
            prop_assume!((&x1 - &x2).norm() > 1e-6);
            let c = gronwall_check(&VectorField::sinusoidal(3, a), &x1, &x2, 1.0, 1000).unwrap();
            prop_assert!(c.ratio <= 1.01 * c.bound);
        }
    }
}
