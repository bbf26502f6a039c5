//! Linear forward operators `A`, the Gaussian noise model and PSNR.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::State;
use crate::rng;

/// A linear measurement operator with its adjoint.
///
/// Images are stored row-major as `index = row * width + col`. Everything
/// except [`LinearOperator::Mask`] is kept as an explicit dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearOperator {
    /// Keeps the listed coordinates of an `n`-vector, in the given order.
    Mask { n: usize, indices: Vec<usize> },
    /// Zero-padded Gaussian blur of a `width x height` image.
    Blur {
        width: usize,
        height: usize,
        sigma: f64,
        size: usize,
        matrix: DMatrix<f64>,
    },
    /// Block averaging by `factor` along each image axis with extent > 1.
    Subsample {
        width: usize,
        height: usize,
        factor: usize,
        matrix: DMatrix<f64>,
    },
    Dense { matrix: DMatrix<f64> },
}

/// Normalized discrete Gaussian `exp(-j^2 / 2 sigma^2)` for `|j| <= size / 2`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

impl LinearOperator {
    pub fn identity(n: usize) -> Self {
        LinearOperator::Mask {
            n,
            indices: (0..n).collect(),
        }
    }

    pub fn mask(n: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("mask index {bad} out of range for n = {n}")));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(Error::contract("mask indices must be distinct"));
        }
        Ok(LinearOperator::Mask { n, indices })
    }

    /// Gaussian blur; a `height` of 1 gives a 1-D blur.
    pub fn blur(width: usize, height: usize, sigma: f64, size: usize) -> Result<Self> {
        if width == 0 || height == 0 || size.is_multiple_of(2) || !(sigma > 0.0) {
            return Err(Error::contract("blur needs a non-empty image, odd kernel size and sigma > 0"));
        }
        let k = gaussian_kernel(sigma, size);
        let ky = if height > 1 { k.clone() } else { vec![1.0] };
        let (rx, ry) = ((k.len() / 2) as i64, (ky.len() / 2) as i64);
        let n = width * height;
        let mut m = DMatrix::zeros(n, n);
        for r in 0..height as i64 {
            for c in 0..width as i64 {
                let out = (r * width as i64 + c) as usize;
                for dy in -ry..=ry {
                    for dx in -rx..=rx {
                        let (rr, cc) = (r - dy, c - dx);
                        if rr < 0 || cc < 0 || rr >= height as i64 || cc >= width as i64 {
                            continue;
                        }
                        m[(out, (rr * width as i64 + cc) as usize)] +=
                            ky[(dy + ry) as usize] * k[(dx + rx) as usize];
                    }
                }
            }
        }
        Ok(LinearOperator::Blur {
            width,
            height,
            sigma,
            size,
            matrix: m,
        })
    }

    pub fn subsample(width: usize, height: usize, factor: usize) -> Result<Self> {
        let fy = if height > 1 { factor } else { 1 };
        if factor == 0 || !width.is_multiple_of(factor) || !height.is_multiple_of(fy) {
            return Err(Error::contract("subsample factor must divide the image extent"));
        }
        let (ow, oh) = (width / factor, height / fy);
        let weight = 1.0 / (factor * fy) as f64;
        let mut m = DMatrix::zeros(ow * oh, width * height);
        for r in 0..height {
            for c in 0..width {
                m[((r / fy) * ow + c / factor, r * width + c)] = weight;
            }
        }
        Ok(LinearOperator::Subsample {
            width,
            height,
            factor,
            matrix: m,
        })
    }

    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.is_empty() || !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("dense operator needs a non-empty finite matrix"));
        }
        Ok(LinearOperator::Dense { matrix })
    }

    /// Output dimension `m`.
    pub fn rows(&self) -> usize {
        match self {
            LinearOperator::Mask { indices, .. } => indices.len(),
            LinearOperator::Blur { matrix, .. }
            | LinearOperator::Subsample { matrix, .. }
            | LinearOperator::Dense { matrix } => matrix.nrows(),
        }
    }

    /// Input dimension `n`.
    pub fn cols(&self) -> usize {
        match self {
            LinearOperator::Mask { n, .. } => *n,
            LinearOperator::Blur { matrix, .. }
            | LinearOperator::Subsample { matrix, .. }
            | LinearOperator::Dense { matrix } => matrix.ncols(),
        }
    }

    fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            LinearOperator::Mask { .. } => None,
            LinearOperator::Blur { matrix, .. }
            | LinearOperator::Subsample { matrix, .. }
            | LinearOperator::Dense { matrix } => Some(matrix),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            LinearOperator::Mask { n, indices } => {
                let mut m = DMatrix::zeros(indices.len(), *n);
                for (r, &i) in indices.iter().enumerate() {
                    m[(r, i)] = 1.0;
                }
                m
            }
            other => other.matrix().unwrap().clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            LinearOperator::Mask { n, indices } => {
                indices.len() == *n && indices.iter().enumerate().all(|(a, &b)| a == b)
            }
            other => {
                let m = other.matrix().unwrap();
                m.is_square() && *m == DMatrix::identity(m.nrows(), m.ncols())
            }
        }
    }

    pub fn apply(&self, x: &State) -> Result<State> {
        if x.len() != self.cols() {
            return Err(Error::contract(format!(
                "operator expects input of dimension {}, got {}",
                self.cols(),
                x.len()
            )));
        }
        Ok(match self {
            LinearOperator::Mask { indices, .. } => {
                DVector::from_iterator(indices.len(), indices.iter().map(|&i| x[i]))
            }
            other => other.matrix().unwrap() * x,
        })
    }

    pub fn apply_adjoint(&self, y: &State) -> Result<State> {
        if y.len() != self.rows() {
            return Err(Error::contract(format!(
                "adjoint expects input of dimension {}, got {}",
                self.rows(),
                y.len()
            )));
        }
        Ok(match self {
            LinearOperator::Mask { n, indices } => {
                let mut x = DVector::zeros(*n);
                for (r, &i) in indices.iter().enumerate() {
                    x[i] = y[r];
                }
                x
            }
            other => other.matrix().unwrap().tr_mul(y),
        })
    }

    /// `A^T A x`.
    pub fn normal_apply(&self, x: &State) -> Result<State> {
        self.apply_adjoint(&self.apply(x)?)
    }
}

/// Serializable description of an operator, as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    Mask { indices: Vec<usize> },
    Blur { width: usize, height: usize, sigma: f64, size: usize },
    Subsample { width: usize, height: usize, factor: usize },
    /// Whitespace-separated matrix, one row per line. Relative paths resolve
    /// against the config file's directory.
    Dense { path: String },
}

impl OperatorSpec {
    /// Builds the operator for signals of dimension `n`.
    pub fn build(&self, n: usize, base_dir: &Path) -> Result<LinearOperator> {
        let op = match self {
            OperatorSpec::Identity => LinearOperator::identity(n),
            OperatorSpec::Mask { indices } => LinearOperator::mask(n, indices.clone())?,
            OperatorSpec::Blur { width, height, sigma, size } => {
                LinearOperator::blur(*width, *height, *sigma, *size)?
            }
            OperatorSpec::Subsample { width, height, factor } => {
                LinearOperator::subsample(*width, *height, *factor)?
            }
            OperatorSpec::Dense { path } => {
                let text = std::fs::read_to_string(base_dir.join(path))?;
                LinearOperator::dense(parse_matrix(&text)?)?
            }
        };
        if op.cols() != n {
            return Err(Error::Config(format!(
                "operator acts on dimension {}, but the signal has dimension {n}",
                op.cols()
            )));
        }
        Ok(op)
    }
}

/// Parses a whitespace-separated matrix with one row per line.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("matrix line {}: {t:?}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!("matrix line {}: ragged row", n + 1)));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("matrix file is empty".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_row_iterator(r, c, rows.into_iter().flatten()))
}

/// A measurement `y = A x_true + sigma xi` together with how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub operator: LinearOperator,
    pub y: State,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn make_observation(
    operator: &LinearOperator,
    x_true: &State,
    noise_sigma: f64,
    seed: u64,
) -> Result<Observation> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::contract("noise sigma must be non-negative"));
    }
    let clean = operator.apply(x_true)?;
    let y = if noise_sigma == 0.0 {
        clean
    } else {
        let mut r = rng::seeded(seed);
        clean + rng::standard_normal(&mut r, operator.rows()) * noise_sigma
    };
    Ok(Observation {
        operator: operator.clone(),
        y,
        noise_sigma,
        seed,
    })
}

/// Value returned by [`psnr`] for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 200.0;

/// `10 log10(range^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &State, reference: &State, data_range: f64) -> f64 {
    assert_eq!(x.len(), reference.len(), "psnr needs equal shapes");
    assert!(data_range > 0.0, "psnr needs a positive data range");
    let mse = (x - reference).norm_squared() / x.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
}
