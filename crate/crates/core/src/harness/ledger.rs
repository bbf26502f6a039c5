use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::solver::{ComplexityRecord, SolveLog};

use super::config::SolverChoice;

pub const LEDGER_FILE: &str = "ledger.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const LEDGER_FORMAT: u32 = 1;

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub objective: f64,
    pub phi: f64,
    pub residual: f64,
    pub psnr: Option<f64>,
    pub x_star: Vec<f64>,
    pub ground_truth: Vec<f64>,
    pub total_forward: u64,
    pub total_vjp: u64,
    pub max_peak_live_tapes: u64,
}

/// Everything a solve produced except wall-clock time, which lives in the
/// file named by `timings_file` so that repeated runs give identical ledgers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub format: u32,
    pub version: String,
    pub config_hash: String,
    pub solver: SolverChoice,
    pub seed: u64,
    pub log: SolveLog,
    pub final_metrics: FinalMetrics,
    pub complexity: ComplexityRecord,
    pub timings_file: String,
}

impl RunLedger {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Wall-clock seconds per named phase, in insertion-independent order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.seconds.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
