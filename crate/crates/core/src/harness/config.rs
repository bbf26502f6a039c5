use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, SyntheticDataset};
use crate::error::{Error, Result};
use crate::net::{Activation, VelocityNet};
use crate::operators::OperatorSpec;
use crate::solver::{GradMode, SolverConfig};
use crate::train::TrainSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    MsFlow,
    DFlow,
    /// Multiple shooting with simultaneous full-gradient steps.
    MsFlowGd,
}

impl SolverChoice {
    pub fn tag(self) -> &'static str {
        match self {
            SolverChoice::MsFlow => "ms_flow",
            SolverChoice::DFlow => "d_flow",
            SolverChoice::MsFlowGd => "ms_flow_gd",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "ms_flow" => Ok(SolverChoice::MsFlow),
            "d_flow" => Ok(SolverChoice::DFlow),
            "ms_flow_gd" => Ok(SolverChoice::MsFlowGd),
            other => Err(Error::Config(format!(
                "unknown solver {other:?}; expected ms_flow, d_flow or ms_flow_gd"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Size of the fixed training set drawn from the dataset generator.
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitChoice {
    #[default]
    Quadratic,
    OneNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub operator: OperatorSpec,
    pub noise_sigma: f64,
    #[serde(default)]
    pub fit: FitChoice,
    /// Peak-to-peak signal range used for PSNR.
    pub data_range: f64,
}

/// Values swept by `ablate`. Empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateGrid {
    #[serde(default)]
    pub solver: Vec<SolverChoice>,
    #[serde(default)]
    pub segments: Vec<usize>,
    #[serde(default)]
    pub inner_sweeps: Vec<usize>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub grad_mode: Vec<GradMode>,
}

/// Everything needed to reproduce a train / solve / ablate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Dataset, initialization, batches, ground truth and noise
    /// use fixed offsets from it; the solver uses `solver_config.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub solver: SolverChoice,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub training: TrainingSpec,
    pub problem: ProblemSpec,
    pub solver_config: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateGrid>,
}

/// Offsets of the independent random streams derived from the root seed.
pub mod stream {
    pub const DATASET: u64 = 0;
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const HELD_OUT: u64 = 5;
    pub const SAMPLES: u64 = 6;
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization. `out_dir` is left out:
    /// where results are written does not change them.
    pub fn hash(&self) -> Result<String> {
        let canonical = ExperimentConfig { out_dir: PathBuf::new(), ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.solver_config
            .validate()
            .map_err(|e| Error::Config(format!("solver_config: {e}")))?;
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if self.training.samples == 0 {
            return Err(Error::Config("training.samples must be positive".into()));
        }
        if !(self.problem.noise_sigma >= 0.0) || !(self.problem.data_range > 0.0) {
            return Err(Error::Config(
                "problem.noise_sigma must be >= 0 and problem.data_range > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_add(stream)
    }

    /// Sets the root seed and the solver seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.solver_config.seed = seed;
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn training_set(&self) -> Result<SyntheticDataset> {
        SyntheticDataset::new(self.dataset.clone(), self.derived_seed(stream::DATASET), self.training.samples)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            steps: self.training.steps,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            seed: self.derived_seed(stream::BATCHES),
        }
    }

    pub fn initial_net(&self) -> Result<VelocityNet> {
        VelocityNet::new(self.dim(), &self.model.hidden, self.model.activation, self.derived_seed(stream::INIT))
    }

    /// Solver settings with the grad mode implied by the solver choice.
    pub fn effective_solver_config(&self) -> SolverConfig {
        let mut c = self.solver_config.clone();
        if self.solver == SolverChoice::MsFlowGd {
            c.grad_mode = GradMode::FullGradient;
        }
        c
    }
}
