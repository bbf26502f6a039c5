//! Synthetic target distributions and sample-based distances.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::State;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Isotropic Gaussian mixture with a shared standard deviation.
    Gmm {
        means: Vec<Vec<f64>>,
        std: f64,
        weights: Vec<f64>,
    },
    /// The classic two interleaved half circles in 2-D.
    TwoMoons { noise: f64 },
    /// `side x side` images made of one or two Gaussian bumps, flattened.
    Blobs { side: usize },
}

impl DatasetSpec {
    /// Two well separated equal-weight components on the horizontal axis.
    pub fn two_component_gmm() -> Self {
        DatasetSpec::Gmm {
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            std: 0.5,
            weights: vec![0.5, 0.5],
        }
    }

    /// `N(0, I)` in `dim` dimensions, i.e. the base distribution itself.
    pub fn standard_normal(dim: usize) -> Self {
        DatasetSpec::Gmm {
            means: vec![vec![0.0; dim]],
            std: 1.0,
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Gmm { means, .. } => means.first().map_or(0, Vec::len),
            DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::Blobs { side } => side * side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Gmm { means, std, weights } => {
                if means.is_empty() || means.len() != weights.len() {
                    return Err(Error::contract("GMM needs one weight per non-empty mean list"));
                }
                let d = means[0].len();
                if d == 0 || means.iter().any(|m| m.len() != d) {
                    return Err(Error::contract("GMM means must share a positive dimension"));
                }
                if !(*std > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::contract("GMM needs std > 0 and non-negative weights"));
                }
            }
            DatasetSpec::TwoMoons { noise } => {
                if !(*noise >= 0.0) {
                    return Err(Error::contract("two-moons noise must be non-negative"));
                }
            }
            DatasetSpec::Blobs { side } => {
                if *side < 2 {
                    return Err(Error::contract("blob images need side >= 2"));
                }
            }
        }
        Ok(())
    }

    /// One sample and, for mixtures, the index of the component it came from.
    pub fn draw_labeled(&self, rng: &mut Rng) -> (State, usize) {
        match self {
            DatasetSpec::Gmm { means, std, weights } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut c = means.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        c = i;
                        break;
                    }
                    u -= w;
                }
                let noise = rng::standard_normal(rng, means[c].len());
                (DVector::from_row_slice(&means[c]) + noise * *std, c)
            }
            DatasetSpec::TwoMoons { noise } => {
                let upper = rng.random::<bool>();
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                let (x, y) = if upper {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let n = Normal::new(0.0, noise.max(0.0)).unwrap();
                (
                    DVector::from_vec(vec![x + n.sample(rng), y + n.sample(rng)]),
                    usize::from(!upper),
                )
            }
            DatasetSpec::Blobs { side } => {
                let side = *side;
                let bumps = 1 + usize::from(rng.random::<bool>());
                let mut img = DVector::zeros(side * side);
                let s = side as f64;
                for _ in 0..bumps {
                    let cx = rng.random_range(0.2 * s..0.8 * s);
                    let cy = rng.random_range(0.2 * s..0.8 * s);
                    let width = rng.random_range(0.08 * s..0.2 * s);
                    let amp = rng.random_range(0.5..1.0);
                    for r in 0..side {
                        for c in 0..side {
                            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                            img[r * side + c] += amp * (-d2 / (2.0 * width * width)).exp();
                        }
                    }
                }
                (img.map(|v: f64| v.min(1.0)), bumps - 1)
            }
        }
    }

    pub fn draw(&self, rng: &mut Rng) -> State {
        self.draw_labeled(rng).0
    }

    pub fn draw_many(&self, n: usize, seed: u64) -> Vec<State> {
        let mut rng = rng::seeded(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    /// Nearest-mean component for mixtures; `None` for other generators.
    pub fn component_of(&self, x: &State) -> Option<usize> {
        let DatasetSpec::Gmm { means, .. } = self else {
            return None;
        };
        means
            .iter()
            .enumerate()
            .map(|(i, m)| (i, (x - DVector::from_row_slice(m)).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

/// A finite training set: `count` samples drawn from `spec` under `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub count: usize,
}

impl SyntheticDataset {
    pub fn new(spec: DatasetSpec, seed: u64, count: usize) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(Error::contract("dataset needs at least one sample"));
        }
        Ok(SyntheticDataset { spec, seed, count })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn samples(&self) -> Vec<State> {
        self.spec.draw_many(self.count, self.seed)
    }
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` with unbiased
/// within-sample terms.
pub fn energy_distance(a: &[State], b: &[State]) -> f64 {
    fn mean_cross(a: &[State], b: &[State]) -> f64 {
        let s: f64 = a.iter().map(|x| b.iter().map(|y| (x - y).norm()).sum::<f64>()).sum();
        s / (a.len() * b.len()) as f64
    }
    fn mean_within(a: &[State]) -> f64 {
        let n = a.len();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += (&a[i] - &a[j]).norm();
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    }
    2.0 * mean_cross(a, b) - mean_within(a) - mean_within(b)
}
