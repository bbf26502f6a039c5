//! MS-Flow in a latent space: the flow acts on a 2-d latent and a fixed
//! decoder maps it to 6 observed pixels. The data update runs inner
//! gradient descent through the decoder.
//!
//!     cargo run --release --example latent_decoder

use msflow::flow::{State, VectorField};
use msflow::net::{Activation, VelocityNet};
use msflow::operators::{make_observation, LinearOperator};
use msflow::prox::{DataFit, ToyDecoder};
use msflow::solver::{ms_flow_solve, Anchor, InverseProblem, SolverConfig};

fn main() -> msflow::Result<()> {
    let decoder = ToyDecoder::new(2, &[16], 6, 5)?;
    let z_true = State::from_column_slice(&[0.8, -0.4]);
    let pixels = decoder.decode(&z_true)?;
    let op = LinearOperator::mask(6, vec![0, 1, 3, 5])?;
    let obs = make_observation(&op, &pixels, 0.005, 7)?;
    let fit = DataFit::latent(&obs, decoder.clone())?;
    let problem = InverseProblem::with_fit(obs, fit).with_ground_truth(pixels.clone(), 2.0)?;

    // A weak, untrained latent flow; the point here is the decoder coupling.
    let field = VectorField::learned(VelocityNet::new(2, &[16], Activation::Tanh, 9)?);
    let cfg = SolverConfig {
        alpha: 0.5,
        lambda: 0.0,
        eta: 0.1,
        segments: 6,
        inner_sweeps: 3,
        outer_iters: 60,
        anchor: Anchor::Zero,
        ..Default::default()
    };
    let out = ms_flow_solve(&problem, &field, &cfg)?;
    let first = &out.log.records[0];
    let last = out.log.final_record();
    println!("residual |A D(z) - y|: {:.4} -> {:.4}", first.residual, last.residual);
    println!("PSNR of decoded pixels: {:.2} dB -> {:.2} dB", first.psnr.unwrap(), last.psnr.unwrap());
    println!("latent x* = ({:+.3}, {:+.3}), true latent ({:+.3}, {:+.3})", out.x_star[0], out.x_star[1], z_true[0], z_true[1]);
    Ok(())
}
