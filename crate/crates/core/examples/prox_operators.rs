//! Closed-form data updates: Tikhonov-type prox for masking, blur and
//! subsampling operators, and the soft-threshold prox for the one-norm fit.
//!
//!     cargo run --release --example prox_operators

use msflow::flow::State;
use msflow::operators::{make_observation, LinearOperator};
use msflow::prox::{prox_one_norm, prox_quadratic, DataFit};
use msflow::rng;

fn main() -> msflow::Result<()> {
    let side = 16;
    let n = side * side;
    let truth = rng::standard_normal(&mut rng::seeded(1), n);
    let x_k = rng::standard_normal(&mut rng::seeded(2), n);
    let alpha = 0.5;
    let ops = [
        ("mask (every 3rd pixel)", LinearOperator::mask(n, (0..n).step_by(3).collect())?),
        ("gaussian blur 5x5", LinearOperator::blur(side, side, 1.2, 5)?),
        ("2x subsampling", LinearOperator::subsample(side, side, 2)?),
    ];
    for (name, op) in &ops {
        let obs = make_observation(op, &truth, 0.01, 3)?;
        let fit = DataFit::quadratic(&obs);
        let x = prox_quadratic(&fit, &x_k, alpha)?;
        // Optimality: A^T (A x - y) + alpha (x - x_K) = 0.
        let grad = op.apply_adjoint(&(op.apply(&x)? - &obs.y))? + (&x - &x_k) * alpha;
        println!("{name:<24} |grad| at prox {:.2e}, data residual {:.3}", grad.norm(), (op.apply(&x)? - &obs.y).norm());
    }

    let y = State::from_column_slice(&[1.0, -2.0, 0.3, 0.0]);
    let obs = make_observation(&LinearOperator::identity(4), &y, 0.0, 0)?;
    let z = State::from_column_slice(&[0.0, 0.0, 0.0, 3.0]);
    let x = prox_one_norm(&DataFit::one_norm(&obs)?, &z, 2.0)?;
    println!("one-norm prox, y = {:?}, x_K = {:?}, alpha 2 -> {:?}", y.as_slice(), z.as_slice(), x.as_slice());
    Ok(())
}
