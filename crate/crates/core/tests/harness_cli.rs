//! Drives the `msflow` binary end to end and reads back what it wrote.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{configs_dir, gmm_config};
use msflow::harness::commands::{ABLATE_FILE, CHECKPOINT_FILE, ITERATIONS_FILE, LOSS_TRACE_FILE, REPORT_FILE, SAMPLES_FILE};
use msflow::harness::ledger::LEDGER_FILE;
use msflow::harness::commands::{read_ablate, read_report};
use msflow::harness::{csvio, AblateGrid, ExperimentConfig, RunLedger, SolverChoice};
use msflow::net::{Activation, VelocityNet};
use msflow::solver::{GradMode, LineSearch};
use tempfile::TempDir;

fn msflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msflow")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON record ({e}): {text}"))
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A briefly trained mixture flow: good enough for counting and ordering
/// checks, cheap enough to train per test.
fn quick_setup(steps: usize) -> (TempDir, ExperimentConfig, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gmm_config();
    cfg.training.steps = steps;
    cfg.solver_config.outer_iters = 3;
    let path = write_config(dir.path(), "cfg.toml", &cfg);
    let train = dir.path().join("train");
    ok(msflow(&["train", "--config", s(&path), "--out", s(&train)]));
    (dir, cfg, train.join(CHECKPOINT_FILE))
}

#[test]
fn train_is_deterministic_and_self_consumable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gmm_config();
    cfg.training.steps = 150;
    let path = write_config(dir.path(), "cfg.toml", &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(msflow(&["train", "--config", s(&path), "--out", s(out)]));
    }
    for f in [CHECKPOINT_FILE, LOSS_TRACE_FILE, SAMPLES_FILE, "train_summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = csvio::read_loss_trace(a.join(LOSS_TRACE_FILE)).unwrap();
    assert_eq!(trace.len(), 150);
    let samples = csvio::read_samples(a.join(SAMPLES_FILE)).unwrap();
    assert!(samples.len() == 500 && samples.iter().all(|x| x.len() == 2));
    VelocityNet::load(a.join(CHECKPOINT_FILE)).unwrap();
}

#[test]
fn zero_training_steps_leave_the_seeded_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gmm_config();
    cfg.training.steps = 0;
    let path = write_config(dir.path(), "cfg.toml", &cfg);
    ok(msflow(&["train", "--config", s(&path), "--out", s(dir.path())]));
    let saved = std::fs::read_to_string(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved, cfg.initial_net().unwrap().to_checkpoint_string());
}

#[test]
fn seed_flag_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gmm_config();
    cfg.training.steps = 20;
    let path = write_config(dir.path(), "cfg.toml", &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(msflow(&["train", "--config", s(&path), "--out", s(&a)]));
    ok(msflow(&["train", "--config", s(&path), "--out", s(&b), "--seed", "43"]));
    assert_ne!(
        std::fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(b.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn zero_field_identity_solve_recovers_the_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    VelocityNet::zeros(4, &[8], Activation::Tanh).unwrap().save(&ckpt).unwrap();
    let cfg = configs_dir().join("zero_field_identity.toml");
    ok(msflow(&["solve", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(dir.path())]));
    let ledger = RunLedger::load(dir.path().join(LEDGER_FILE)).unwrap();
    assert!(ledger.final_metrics.residual <= 1e-6, "residual {}", ledger.final_metrics.residual);
    assert!(ledger.complexity.rows.iter().all(|r| r.n_vjp > 0 && r.peak_live_tapes == 1));
}

#[test]
fn single_cell_ablation_matches_solve() {
    let (dir, cfg, ckpt) = quick_setup(200);
    let path = write_config(dir.path(), "cfg.toml", &cfg);
    let (solve, ablate) = (dir.path().join("solve"), dir.path().join("ablate"));
    ok(msflow(&["solve", "--config", s(&path), "--checkpoint", s(&ckpt), "--out", s(&solve)]));
    ok(msflow(&["ablate", "--config", s(&path), "--checkpoint", s(&ckpt), "--out", s(&ablate)]));
    let iters = csvio::read_iterations(solve.join(ITERATIONS_FILE)).unwrap();
    let rows = read_ablate(ablate.join(ABLATE_FILE)).unwrap();
    assert_eq!(iters.len(), rows.len());
    for (i, r) in iters.iter().zip(&rows) {
        assert_eq!(r.status, "ok");
        assert_eq!(Some(i.outer_iter), r.outer_iter);
        assert_eq!(Some(i.objective), r.objective);
        assert_eq!(Some(i.residual), r.residual);
        assert_eq!(
            (Some(i.n_forward), Some(i.n_vjp), Some(i.peak_live_tapes)),
            (r.n_forward, r.n_vjp, r.peak_live_tapes)
        );
    }
    assert_eq!(
        std::fs::read(solve.join(LEDGER_FILE)).unwrap(),
        std::fs::read(ablate.join("cells/cell000").join(LEDGER_FILE)).unwrap()
    );
}

#[test]
fn segment_sweep_shows_constant_and_linear_memory() {
    let (dir, _, ckpt) = quick_setup(200);
    let mut cfg = ExperimentConfig::load(configs_dir().join("gmm_ablate.toml")).unwrap();
    cfg.solver_config.outer_iters = 2;
    let grid = cfg.ablate.as_mut().unwrap();
    grid.solver = vec![SolverChoice::MsFlow, SolverChoice::DFlow];
    let path = write_config(dir.path(), "ablate.toml", &cfg);
    let out = dir.path().join("ablate");
    ok(msflow(&["ablate", "--config", s(&path), "--checkpoint", s(&ckpt), "--out", s(&out), "--threads", "3"]));
    let rows = read_ablate(out.join(ABLATE_FILE)).unwrap();
    // 3 segment counts x 2 modes for MS-Flow, 3 for single shooting.
    let cells: std::collections::BTreeSet<_> = rows.iter().map(|r| r.cell.clone()).collect();
    assert_eq!(cells.len(), 9);
    for r in rows.iter().filter(|r| r.outer_iter.unwrap() > 0) {
        assert_eq!(r.status, "ok");
        let k = r.segments as u64;
        let want = match (r.solver, r.grad_mode) {
            (SolverChoice::DFlow, _) => (k, k, k),
            (_, Some(GradMode::Exact)) => (5 * k, 5 * k, 1),
            (_, Some(GradMode::JacobianFree)) => (5 * k, 0, 1),
            other => panic!("unexpected cell {other:?}"),
        };
        assert_eq!((r.n_forward.unwrap(), r.n_vjp.unwrap(), r.peak_live_tapes.unwrap()), want, "{r:?}");
    }

    ok(msflow(&["report", "--out", s(&out)]));
    let report = read_report(out.join(REPORT_FILE)).unwrap();
    assert_eq!(report.len(), 9);
    assert!(report.iter().all(|r| r.model_ok), "{report:?}");
}

#[test]
fn gradient_mode_sweep_orders_final_objectives() {
    let (dir, mut cfg, ckpt) = quick_setup(1000);
    cfg.solver_config.line_search = LineSearch::armijo();
    cfg.solver_config.outer_iters = 1;
    cfg.solver_config.inner_sweeps = 40;
    cfg.ablate = Some(AblateGrid {
        grad_mode: vec![GradMode::Exact, GradMode::JacobianFree, GradMode::FullGradient],
        ..Default::default()
    });
    let path = write_config(dir.path(), "modes.toml", &cfg);
    let out = dir.path().join("modes");
    ok(msflow(&["ablate", "--config", s(&path), "--checkpoint", s(&ckpt), "--out", s(&out), "--threads", "2"]));

    #[derive(serde::Deserialize)]
    struct Sweep {
        #[serde(rename = "J")]
        objective: f64,
    }
    let mut finals = Vec::new();
    for cell in ["cell000", "cell001", "cell002"] {
        let trace: Vec<Sweep> = csvio::read_rows(out.join("cells").join(cell).join("sweeps.csv")).unwrap();
        assert_eq!(trace.len(), 41);
        for w in trace.windows(2) {
            assert!(w[1].objective <= w[0].objective * (1.0 + 1e-12), "{cell} trace rose");
        }
        finals.push(trace.last().unwrap().objective);
    }
    assert!(finals[0] <= finals[1], "exact {} vs jacobian-free {}", finals[0], finals[1]);
}

#[test]
fn failures_exit_nonzero_with_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = msflow(&["solve", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["kind"], "config");
    assert!(rec["message"].as_str().unwrap().contains("nope.toml"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"forty-two\"\n").unwrap();
    let out = msflow(&["train", "--config", s(&bad)]);
    assert_eq!((out.status.code(), error_record(&out)["kind"].as_str()), (Some(2), Some("config")));

    let cfg = configs_dir().join("gmm_inpaint.toml");
    let out = msflow(&["solve", "--config", s(&cfg), "--solver", "newton", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    // A 4-d checkpoint against the 2-d mixture problem.
    let ckpt = dir.path().join("wrong.ckpt");
    VelocityNet::zeros(4, &[8], Activation::Tanh).unwrap().save(&ckpt).unwrap();
    let out = msflow(&["solve", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(dir.path())]);
    assert_eq!((out.status.code(), error_record(&out)["kind"].as_str()), (Some(1), Some("contract")));

    let out = msflow(&["report", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "config");
}
