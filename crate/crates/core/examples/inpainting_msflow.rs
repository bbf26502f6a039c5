//! Recover a mixture draw from its first coordinate with MS-Flow and with
//! single shooting, on the flow trained by `train_gmm_flow`.
//!
//!     cargo run --release --example inpainting_msflow [CHECKPOINT]
//!
//! Without a checkpoint the flow is trained first, which takes a while.

use std::path::{Path, PathBuf};

use msflow::flow::VectorField;
use msflow::harness::{build_problem, cmd_train, load_checkpoint, ExperimentConfig};
use msflow::solver::{counter_report, d_flow_solve, ms_flow_solve};

fn main() -> msflow::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let configs = root.join("configs");
    let cfg = ExperimentConfig::load(configs.join("gmm_inpaint.toml"))?;
    let ckpt = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = root.join("runs/gmm_inpaint");
            if !dir.join("model.ckpt").exists() {
                println!("no checkpoint yet; training ({} steps)", cfg.training.steps);
                cmd_train(&cfg, &dir)?;
            }
            dir.join("model.ckpt")
        }
    };
    let net = load_checkpoint(&cfg, &ckpt)?;
    let problem = build_problem(&cfg, &configs)?;
    let truth = problem.ground_truth.clone().expect("config problems carry a ground truth");
    println!("truth ({:+.3}, {:+.3}); observed y = {:+.4}", truth[0], truth[1], problem.observation.y[0]);

    let ms = ms_flow_solve(&problem, &VectorField::learned(net.clone()), &cfg.solver_config)?;
    let last = ms.log.final_record();
    println!(
        "MS-Flow  x* = ({:+.3}, {:+.3})  residual {:.2e}  J {:.3e}",
        ms.x_star[0], ms.x_star[1], last.residual, last.objective
    );
    let d = d_flow_solve(&problem, &VectorField::learned(net), &cfg.solver_config)?;
    println!(
        "D-Flow   x* = ({:+.3}, {:+.3})  residual {:.2e}",
        d.x_star[0],
        d.x_star[1],
        d.log.final_record().residual
    );
    for (name, log) in [("MS-Flow", &ms.log), ("D-Flow", &d.log)] {
        let rec = counter_report(log)?;
        let m = rec.model;
        println!(
            "{name:<8} per iteration: {} forward, {} VJP, peak {} live tapes (matches model)",
            m.n_forward, m.n_vjp, m.peak_live_tapes
        );
    }
    Ok(())
}
