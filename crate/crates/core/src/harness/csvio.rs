//! CSV files written by the harness, and readers for each of them.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::State;
use crate::solver::IterationRecord;
use crate::train::LossRecord;

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `loss_trace.csv`: `step,loss`.
pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    write_rows(path, trace)
}

pub fn read_loss_trace(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    read_rows(path)
}

/// `iterations.csv`, one row per outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub outer_iter: usize,
    pub sweep: usize,
    #[serde(rename = "J")]
    pub objective: f64,
    pub phi: f64,
    pub residual: f64,
    pub psnr: Option<f64>,
    pub n_forward: u64,
    pub n_vjp: u64,
    pub peak_live_tapes: u64,
}

impl From<&IterationRecord> for IterationRow {
    fn from(r: &IterationRecord) -> Self {
        IterationRow {
            outer_iter: r.outer_iter,
            sweep: r.sweep,
            objective: r.objective,
            phi: r.phi,
            residual: r.residual,
            psnr: r.psnr,
            n_forward: r.n_forward,
            n_vjp: r.n_vjp,
            peak_live_tapes: r.peak_live_tapes,
        }
    }
}

pub fn write_iterations(path: impl AsRef<Path>, records: &[IterationRecord]) -> Result<()> {
    let rows: Vec<IterationRow> = records.iter().map(IterationRow::from).collect();
    write_rows(path, &rows)
}

pub fn read_iterations(path: impl AsRef<Path>) -> Result<Vec<IterationRow>> {
    read_rows(path)
}

/// `samples.csv`: header `dim0,...,dim{d-1}`, one sample per row.
pub fn write_samples(path: impl AsRef<Path>, samples: &[State]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.len());
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::contract("samples must share one dimension"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..d).map(|i| format!("dim{i}")))?;
    for s in samples {
        w.serialize(s.as_slice())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<State>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    for (i, h) in header.iter().enumerate() {
        if h != format!("dim{i}") {
            return Err(Error::Parse(format!("samples header column {i} is {h:?}, expected dim{i}")));
        }
    }
    r.deserialize::<Vec<f64>>()
        .map(|row| Ok(State::from_vec(row?)))
        .collect()
}
