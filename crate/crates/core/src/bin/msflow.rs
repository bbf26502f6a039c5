use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use msflow::harness::{self, ExperimentConfig, SolverChoice};
use msflow::{Error, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Verb {
    Train,
    Solve,
    Ablate,
    Report,
}

/// Train toy flows and solve inverse problems with multiple shooting.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    verb: Verb,
    /// Experiment config (TOML). Required except for `report`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flow checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the root and solver seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for `ablate`.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// ms_flow, d_flow or ms_flow_gd; overrides the config.
    #[arg(long)]
    solver: Option<String>,
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(name) = &cli.solver {
        cfg.solver = SolverChoice::from_tag(name)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn run(cli: &Cli) -> Result<()> {
    if let Verb::Report = cli.verb {
        let dir = cli
            .out
            .as_ref()
            .ok_or_else(|| Error::Config("report needs --out DIR".into()))?;
        let rows = harness::cmd_report(dir)?;
        for r in rows {
            println!(
                "{:<40} {:<10} K={:<3} L={:<2} fwd/it={:<5} vjp/it={:<5} peak={:<3} model={} J={:.6e} residual={:.3e}",
                r.ledger,
                r.solver.tag(),
                r.segments,
                r.inner_sweeps,
                r.n_forward_per_iter.map_or("-".into(), |v| v.to_string()),
                r.n_vjp_per_iter.map_or("-".into(), |v| v.to_string()),
                r.peak_live_tapes.map_or("-".into(), |v| v.to_string()),
                if r.model_ok { "ok" } else { "MISMATCH" },
                r.objective,
                r.residual,
            );
        }
        return Ok(());
    }
    let (cfg, base) = load_config(cli)?;
    let out = cfg.out_dir.clone();
    let checkpoint = cli
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join(harness::commands::CHECKPOINT_FILE));
    match cli.verb {
        Verb::Train => {
            let s = harness::cmd_train(&cfg, &out)?;
            println!(
                "trained {} steps: held-out loss {:.6} -> {:.6}; wrote {}",
                s.steps,
                s.held_out_initial,
                s.held_out_final,
                out.display()
            );
        }
        Verb::Solve => {
            let l = harness::cmd_solve(&cfg, &base, &checkpoint, &out)?;
            let m = &l.final_metrics;
            println!(
                "{}: {} iterations, J {:.6e}, residual {:.3e}, psnr {}; wrote {}",
                l.solver.tag(),
                l.log.records.len() - 1,
                m.objective,
                m.residual,
                m.psnr.map_or("-".into(), |p| format!("{p:.2} dB")),
                out.display()
            );
        }
        Verb::Ablate => {
            let rows = harness::cmd_ablate(&cfg, &base, &checkpoint, &out, cli.threads)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} rows, {failed} failed cells; wrote {}", rows.len(), out.display());
        }
        Verb::Report => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parse(_) => 2,
                _ => 1,
            })
        }
    }
}
