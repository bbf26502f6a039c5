//! Randomized invariants of the trajectory objective, the sweep and the
//! single-shooting baseline.

mod common;

use common::{fd_gradient, rel_err};
use msflow::flow::{State, TimeGrid, VectorField};
use msflow::net::{Activation, VelocityNet};
use msflow::operators::{make_observation, LinearOperator};
use msflow::solver::{
    backward_sweep, d_flow_solve, init_latent, trajectory_gradient, trajectory_objective, GradMode, InverseProblem,
    LineSearch, SolverConfig, Trajectory,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn state(v: &[f64]) -> State {
    State::from_column_slice(v)
}

fn arb_traj(d: usize) -> impl Strategy<Value = (Vec<State>, State)> {
    (1usize..=5).prop_flat_map(move |k| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k + 1),
            prop::collection::vec(-2.0f64..2.0, d),
        )
            .prop_map(|(pts, xs)| (pts.iter().map(|p| state(p)).collect(), state(&xs)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trajectory_gradient_matches_finite_differences(
        (pts, x_star) in arb_traj(2),
        m in prop::collection::vec(-1.5f64..1.5, 4),
        alpha in 0.05f64..2.0,
        gamma in 0.1f64..3.0,
        substeps in 1usize..=3,
    ) {
        let field = VectorField::linear(DMatrix::from_row_slice(2, 2, &m)).unwrap();
        let k = pts.len() - 1;
        // No prior here: it is singular at the origin, which random points may hit.
        let cfg = SolverConfig { alpha, gamma, lambda: 0.0, segments: k, substeps, ..Default::default() };
        let traj = Trajectory::new(pts, TimeGrid::uniform(k).unwrap(), x_star.clone()).unwrap();
        let g = trajectory_gradient(&traj, &x_star, &field, &cfg).unwrap();
        for b in 0..=k {
            let fd = fd_gradient(&traj.points[b], 1e-6, |p| {
                let mut t = traj.clone();
                t.points[b] = p.clone();
                trajectory_objective(&t, &x_star, &field, &cfg).unwrap()
            });
            prop_assert!((&fd - &g[b]).norm() <= 1e-6 * (1.0 + g[b].norm()), "block {}: {} vs {}", b, fd, g[b]);
        }
    }

    /// Every block sees its later neighbour already updated in this sweep
    /// and its earlier neighbour still from the previous one.
    #[test]
    fn sweeps_run_backward_in_gauss_seidel_order(
        (pts, x_star) in arb_traj(3),
        mode in prop_oneof![Just(GradMode::Exact), Just(GradMode::JacobianFree)],
        armijo in any::<bool>(),
        sweeps in 1u64..4,
    ) {
        let field = VectorField::learned(VelocityNet::new(3, &[8], Activation::Tanh, 1).unwrap());
        let k = pts.len() - 1;
        let cfg = SolverConfig {
            segments: k,
            lambda: 0.0,
            grad_mode: mode,
            line_search: if armijo { LineSearch::armijo() } else { LineSearch::Off },
            ..Default::default()
        };
        let mut traj = Trajectory::new(pts, TimeGrid::uniform(k).unwrap(), x_star.clone()).unwrap();
        for s in 1..=sweeps {
            let rep = backward_sweep(&mut traj, &x_star, &field, &cfg).unwrap();
            let order: Vec<usize> = rep.blocks.iter().map(|b| b.block).collect();
            prop_assert_eq!(order, (0..=k).rev().collect::<Vec<_>>());
            for b in &rep.blocks {
                prop_assert_eq!(b.next_version, (b.block < k).then_some(s));
                prop_assert_eq!(b.prev_version, (b.block > 0).then_some(s - 1));
            }
        }
    }

    /// With a zero field the flow is the identity, so single shooting is
    /// plain gradient descent on the data fit plus prior.
    #[test]
    fn zero_field_single_shooting_is_latent_descent(
        truth in prop::collection::vec(-2.0f64..2.0, 3),
        eta in 0.01f64..0.5,
        lambda in prop_oneof![Just(0.0), 0.001f64..0.1],
        iters in 1usize..15,
        segments in 1usize..6,
    ) {
        let op = LinearOperator::mask(3, vec![0, 2]).unwrap();
        let problem = InverseProblem::quadratic(make_observation(&op, &state(&truth), 0.05, 4).unwrap());
        let field = VectorField::zero(3);
        let cfg = SolverConfig { eta, lambda, segments, outer_iters: iters, ..Default::default() };
        let out = d_flow_solve(&problem, &field, &cfg).unwrap();

        let prior = cfg.prior(3).unwrap();
        let mut x = init_latent(&problem.observation, &field, &cfg).unwrap();
        for it in 0..=iters {
            if it > 0 {
                let mut g = problem.fit.gradient(&x).unwrap();
                if let Some(p) = &prior {
                    g += p.weighted_grad(&x).unwrap();
                }
                x = &x - &g * eta;
            }
            let j = problem.fit.value(&x).unwrap() + prior.map_or(0.0, |p| p.weighted_value(&x).unwrap());
            prop_assert_eq!(out.log.records[it].objective, j, "iteration {}", it);
        }
        prop_assert_eq!(&out.x0, &x);
        prop_assert!(rel_err(&out.x_star, &x) == 0.0);
    }
}
