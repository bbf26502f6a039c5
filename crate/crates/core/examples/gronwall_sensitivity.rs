//! How far two nearby starting points drift apart under Euler integration,
//! against the exp(L t) growth bound for fields with a known Lipschitz constant.
//!
//!     cargo run --release --example gronwall_sensitivity

use msflow::flow::{gronwall_check, State, VectorField};
use nalgebra::{DMatrix, DVector};

fn main() -> msflow::Result<()> {
    let fields = [
        ("linear x -> x", VectorField::linear(DMatrix::identity(2, 2))?),
        ("linear x -> diag(0.3, -1) x", VectorField::linear(DMatrix::from_diagonal(&DVector::from_column_slice(&[0.3, -1.0])))?),
        ("rotation", VectorField::rotation()),
        ("sinusoidal, amplitude 0.7", VectorField::sinusoidal(2, 0.7)),
        ("zero", VectorField::zero(2)),
    ];
    let x1 = State::from_column_slice(&[0.4, -0.3]);
    let x2 = State::from_column_slice(&[0.45, -0.2]);
    println!("{:<30} {:>6} {:>10} {:>10} {:>7}", "field", "t", "ratio", "exp(Lt)", "used");
    for (name, f) in &fields {
        for horizon in [0.25, 0.5, 1.0] {
            let c = gronwall_check(f, &x1, &x2, horizon, 1000)?;
            println!("{name:<30} {horizon:>6} {:>10.5} {:>10.5} {:>6.1}%", c.ratio, c.bound, 100.0 * c.ratio / c.bound);
        }
    }
    Ok(())
}
