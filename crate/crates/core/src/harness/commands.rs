use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample, State, TimeGrid, VectorField};
use crate::net::VelocityNet;
use crate::operators::make_observation;
use crate::prox::DataFit;
use crate::solver::{
    counter_report, d_flow_solve, ms_flow_solve, GradMode, InverseProblem, Method, SolveLog,
};
use crate::train::{held_out_loss, train_flow};

use super::config::{stream, ExperimentConfig, FitChoice, SolverChoice};
use super::csvio;
use super::ledger::{version_string, FinalMetrics, RunLedger, Timings, LEDGER_FILE, LEDGER_FORMAT, TIMINGS_FILE};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const SWEEPS_FILE: &str = "sweeps.csv";
pub const ABLATE_FILE: &str = "ablate.csv";
pub const REPORT_FILE: &str = "report.csv";

/// Samples exported after training, integrated with this many Euler steps.
pub const EXPORT_SAMPLES: usize = 500;
pub const EXPORT_STEPS: usize = 100;
pub const HELD_OUT_BATCH: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub version: String,
    pub config_hash: String,
    pub steps: usize,
    pub held_out_initial: f64,
    pub held_out_final: f64,
}

/// Train the configured flow; writes the checkpoint, loss trace, exported
/// samples and a summary into `out`. If training diverges the last finite
/// network is still written before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let mut timings = Timings::default();
    let data = cfg.training_set()?;
    let net = cfg.initial_net()?;
    let held_seed = cfg.derived_seed(stream::HELD_OUT);
    let held_out_initial = held_out_loss(&net, &data, HELD_OUT_BATCH, held_seed)?;
    let outcome = match timings.time("train", || train_flow(&data, net, &cfg.schedule())) {
        Ok(o) => o,
        Err(Error::TrainingDiverged { step, last_finite }) => {
            last_finite.save(out.join(CHECKPOINT_FILE))?;
            return Err(Error::TrainingDiverged { step, last_finite });
        }
        Err(e) => return Err(e),
    };
    outcome.net.save(out.join(CHECKPOINT_FILE))?;
    csvio::write_loss_trace(out.join(LOSS_TRACE_FILE), &outcome.trace)?;
    let field = VectorField::learned(outcome.net.clone());
    let samples = timings.time("sample", || {
        sample(&field, EXPORT_SAMPLES, &TimeGrid::uniform(EXPORT_STEPS)?, cfg.derived_seed(stream::SAMPLES))
    })?;
    csvio::write_samples(out.join(SAMPLES_FILE), &samples)?;
    let summary = TrainSummary {
        version: version_string(),
        config_hash: cfg.hash()?,
        steps: cfg.training.steps,
        held_out_initial,
        held_out_final: held_out_loss(&outcome.net, &data, HELD_OUT_BATCH, held_seed)?,
    };
    std::fs::write(out.join(TRAIN_SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    timings.save(out.join(TIMINGS_FILE))?;
    Ok(summary)
}

/// The seeded ground truth, operator and measurement described by `cfg`.
/// Relative operator files resolve against `base_dir`.
pub fn build_problem(cfg: &ExperimentConfig, base_dir: &Path) -> Result<InverseProblem> {
    let d = cfg.dim();
    let truth = cfg
        .dataset
        .draw_many(1, cfg.derived_seed(stream::TRUTH))
        .pop()
        .expect("one draw requested");
    let op = cfg.problem.operator.build(d, base_dir)?;
    let obs = make_observation(&op, &truth, cfg.problem.noise_sigma, cfg.derived_seed(stream::NOISE))?;
    let fit = match cfg.problem.fit {
        FitChoice::Quadratic => DataFit::quadratic(&obs),
        FitChoice::OneNorm => DataFit::one_norm(&obs)?,
    };
    InverseProblem::with_fit(obs, fit).with_ground_truth(truth, cfg.problem.data_range)
}

pub fn load_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<VelocityNet> {
    let net = VelocityNet::load(checkpoint)?;
    if net.dim() != cfg.dim() {
        return Err(Error::contract(format!(
            "checkpoint {} has state dimension {}, the configured problem {}",
            checkpoint.display(),
            net.dim(),
            cfg.dim()
        )));
    }
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepRow {
    outer_iter: usize,
    sweep: usize,
    #[serde(rename = "J")]
    objective: f64,
}

/// Run the configured solver and write `ledger.json`, `iterations.csv`,
/// `sweeps.csv` and `timings.json` into `out`.
pub fn cmd_solve(cfg: &ExperimentConfig, base_dir: &Path, checkpoint: &Path, out: &Path) -> Result<RunLedger> {
    std::fs::create_dir_all(out)?;
    let mut timings = Timings::default();
    let net = load_checkpoint(cfg, checkpoint)?;
    let problem = build_problem(cfg, base_dir)?;
    let field = VectorField::learned(net);
    let scfg = cfg.effective_solver_config();
    let (x_star, log): (State, SolveLog) = timings.time("solve", || -> Result<_> {
        Ok(match cfg.solver {
            SolverChoice::DFlow => {
                let o = d_flow_solve(&problem, &field, &scfg)?;
                (o.x_star, o.log)
            }
            SolverChoice::MsFlow | SolverChoice::MsFlowGd => {
                let o = ms_flow_solve(&problem, &field, &scfg)?;
                (o.x_star, o.log)
            }
        })
    })?;
    let complexity = counter_report(&log)?;
    let last = log.final_record();
    let final_metrics = FinalMetrics {
        objective: last.objective,
        phi: last.phi,
        residual: last.residual,
        psnr: last.psnr,
        x_star: x_star.iter().copied().collect(),
        ground_truth: problem.ground_truth.as_ref().map(|t| t.iter().copied().collect()).unwrap_or_default(),
        total_forward: field.counters().n_forward(),
        total_vjp: field.counters().n_vjp(),
        max_peak_live_tapes: log.records.iter().map(|r| r.peak_live_tapes).max().unwrap_or(0),
    };
    let ledger = RunLedger {
        format: LEDGER_FORMAT,
        version: version_string(),
        config_hash: cfg.hash()?,
        solver: cfg.solver,
        seed: cfg.seed,
        log,
        final_metrics,
        complexity,
        timings_file: TIMINGS_FILE.to_string(),
    };
    ledger.save(out.join(LEDGER_FILE))?;
    csvio::write_iterations(out.join(ITERATIONS_FILE), &ledger.log.records)?;
    let sweeps: Vec<SweepRow> = ledger
        .log
        .sweep_objectives
        .iter()
        .enumerate()
        .flat_map(|(i, trace)| {
            trace.iter().enumerate().map(move |(s, &j)| SweepRow {
                outer_iter: i + 1,
                sweep: s,
                objective: j,
            })
        })
        .collect();
    csvio::write_rows(out.join(SWEEPS_FILE), &sweeps)?;
    timings.save(out.join(TIMINGS_FILE))?;
    Ok(ledger)
}

/// One row of `ablate.csv`: a grid cell at one outer iteration, or a single
/// row with `status = "error"` when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub cell: String,
    pub solver: SolverChoice,
    pub grad_mode: Option<GradMode>,
    pub segments: usize,
    pub inner_sweeps: usize,
    pub lambda: f64,
    pub status: String,
    pub error: Option<String>,
    pub outer_iter: Option<usize>,
    #[serde(rename = "J")]
    pub objective: Option<f64>,
    pub phi: Option<f64>,
    pub residual: Option<f64>,
    pub psnr: Option<f64>,
    pub n_forward: Option<u64>,
    pub n_vjp: Option<u64>,
    pub peak_live_tapes: Option<u64>,
}

/// Cell configurations of the grid, in row-major order over
/// `solver, segments, inner_sweeps, lambda, grad_mode`. Settings that do not
/// affect single shooting are pinned for its cells, and duplicates dropped.
fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

pub fn ablate_cells(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let grid = cfg.ablate.clone().unwrap_or_default();
    let base = &cfg.solver_config;
    let solvers = or_base(&grid.solver, cfg.solver);
    let ks = or_base(&grid.segments, base.segments);
    let ls = or_base(&grid.inner_sweeps, base.inner_sweeps);
    let lambdas = or_base(&grid.lambda, base.lambda);
    let modes = or_base(&grid.grad_mode, base.grad_mode);
    let mut cells: Vec<ExperimentConfig> = Vec::new();
    for &solver in &solvers {
        for &k in &ks {
            for &l in &ls {
                for &lambda in &lambdas {
                    for &mode in &modes {
                        let mut c = cfg.clone();
                        c.ablate = None;
                        c.solver = solver;
                        c.solver_config.segments = k;
                        c.solver_config.lambda = lambda;
                        let single = solver == SolverChoice::DFlow;
                        c.solver_config.inner_sweeps = if single { base.inner_sweeps } else { l };
                        c.solver_config.grad_mode = if single { base.grad_mode } else { mode };
                        if !cells.contains(&c) {
                            cells.push(c);
                        }
                    }
                }
            }
        }
    }
    cells
}

fn cell_rows(id: &str, c: &ExperimentConfig, result: &Result<RunLedger>) -> Vec<AblateRow> {
    let grad_mode = match c.solver {
        SolverChoice::DFlow => None,
        _ => Some(c.effective_solver_config().grad_mode),
    };
    let base = AblateRow {
        cell: id.to_string(),
        solver: c.solver,
        grad_mode,
        segments: c.solver_config.segments,
        inner_sweeps: c.solver_config.inner_sweeps,
        lambda: c.solver_config.lambda,
        status: "ok".into(),
        error: None,
        outer_iter: None,
        objective: None,
        phi: None,
        residual: None,
        psnr: None,
        n_forward: None,
        n_vjp: None,
        peak_live_tapes: None,
    };
    match result {
        Err(e) => vec![AblateRow {
            status: "error".into(),
            error: Some(format!("{}: {e}", e.kind())),
            ..base
        }],
        Ok(ledger) => ledger
            .log
            .records
            .iter()
            .map(|r| AblateRow {
                outer_iter: Some(r.outer_iter),
                objective: Some(r.objective),
                phi: Some(r.phi),
                residual: Some(r.residual),
                psnr: r.psnr,
                n_forward: Some(r.n_forward),
                n_vjp: Some(r.n_vjp),
                peak_live_tapes: Some(r.peak_live_tapes),
                ..base.clone()
            })
            .collect(),
    }
}

/// Run every grid cell with `threads` workers. Each cell writes a full solve
/// into `out/cells/<id>`; failures become error rows. The merged table goes
/// to `out/ablate.csv`, ordered as [`ablate_cells`] regardless of threading.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    threads: usize,
) -> Result<Vec<AblateRow>> {
    std::fs::create_dir_all(out)?;
    let cells = ablate_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Vec<AblateRow>> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let id = format!("cell{i:03}");
                let r = cmd_solve(c, base_dir, checkpoint, &out.join("cells").join(&id));
                cell_rows(&id, c, &r)
            })
            .collect()
    });
    let rows: Vec<AblateRow> = results.into_iter().flatten().collect();
    csvio::write_rows(out.join(ABLATE_FILE), &rows)?;
    Ok(rows)
}

pub fn read_ablate(path: impl AsRef<Path>) -> Result<Vec<AblateRow>> {
    csvio::read_rows(path)
}

/// One ledger summarized, with its counters re-checked against the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub ledger: String,
    pub solver: SolverChoice,
    pub grad_mode: Option<GradMode>,
    pub segments: usize,
    pub inner_sweeps: usize,
    pub iterations: usize,
    pub n_forward_per_iter: Option<u64>,
    pub n_vjp_per_iter: Option<u64>,
    pub peak_live_tapes: Option<u64>,
    pub state_count: usize,
    pub model_ok: bool,
    pub model_error: Option<String>,
    #[serde(rename = "J")]
    pub objective: f64,
    pub residual: f64,
    pub psnr: Option<f64>,
}

fn find_ledgers(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_ledgers(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == LEDGER_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

/// Summarize every `ledger.json` below `dir` into `dir/report.csv`.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut paths = Vec::new();
    find_ledgers(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no {LEDGER_FILE} found under {}", dir.display())));
    }
    let mut rows = Vec::new();
    for p in paths {
        let ledger = RunLedger::load(&p)?;
        let check = counter_report(&ledger.log);
        let iters: Vec<_> = ledger.log.records.iter().filter(|r| r.outer_iter > 0).collect();
        let last = ledger.log.final_record();
        rows.push(ReportRow {
            ledger: p.strip_prefix(dir).unwrap_or(&p).display().to_string(),
            solver: ledger.solver,
            grad_mode: ledger.log.grad_mode.filter(|_| ledger.log.method == Method::MsFlow),
            segments: ledger.log.segments,
            inner_sweeps: ledger.log.inner_sweeps,
            iterations: iters.len(),
            n_forward_per_iter: iters.iter().map(|r| r.n_forward).max(),
            n_vjp_per_iter: iters.iter().map(|r| r.n_vjp).max(),
            peak_live_tapes: iters.iter().map(|r| r.peak_live_tapes).max(),
            state_count: ledger.log.state_count,
            model_ok: check.is_ok(),
            model_error: check.err().map(|e| e.to_string()),
            objective: last.objective,
            residual: last.residual,
            psnr: last.psnr,
        });
    }
    csvio::write_rows(dir.join(REPORT_FILE), &rows)?;
    Ok(rows)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    csvio::read_rows(path)
}
