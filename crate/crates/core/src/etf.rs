//! Simplex equiangular tight frames and deviation metrics for classifiers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classifier whose rows form a simplex ETF:
/// `W = m * sqrt(C/(C-1)) * (I - 11ᵀ/C) * Uᵀ` with `UᵀU = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexEtf {
    num_classes: usize,
    feature_dim: usize,
    multiplier: f64,
    /// `d x C`, orthonormal columns.
    basis: DMatrix<f64>,
    /// `C x d`, row `i` is the classifier vector of class `i`.
    rows: DMatrix<f64>,
}

impl SimplexEtf {
    /// Builds the frame from an explicit partial-orthogonal basis.
    pub fn from_basis(basis: DMatrix<f64>, multiplier: f64) -> Result<Self> {
        let (d, c) = basis.shape();
        validate_shape(c, d, multiplier)?;
        let centering = DMatrix::<f64>::identity(c, c) - DMatrix::from_element(c, c, 1.0 / c as f64);
        let scale = multiplier * (c as f64 / (c as f64 - 1.0)).sqrt();
        let rows = centering * basis.transpose() * scale;
        Ok(Self { num_classes: c, feature_dim: d, multiplier, basis, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Classifier row `i` as a column vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }
}

fn validate_shape(c: usize, d: usize, m: f64) -> Result<()> {
    if c < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {c}")));
    }
    if d < c {
        return Err(Error::InvalidArgument(format!("feature dimension {d} is smaller than the number of classes {c}")));
    }
    if m == 0.0 || !m.is_finite() {
        return Err(Error::InvalidArgument(format!("multiplier must be finite and nonzero, got {m}")));
    }
    Ok(())
}

/// Builds a simplex ETF with `C` classes in dimension `d`.
///
/// The basis comes from a seeded matrix with entries uniform in `[-1, 1]`,
/// orthonormalized column by column with modified Gram-Schmidt.
pub fn build_simplex_etf(num_classes: usize, feature_dim: usize, multiplier: f64, seed: u64) -> Result<SimplexEtf> {
    validate_shape(num_classes, feature_dim, multiplier)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(feature_dim, num_classes, |_, _| rng.random_range(-1.0..=1.0));
    let basis = orthonormalize_columns(raw)?;
    SimplexEtf::from_basis(basis, multiplier)
}

/// Modified Gram-Schmidt on the columns of `m`.
pub(crate) fn orthonormalize_columns(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = m.ncols();
    for j in 0..cols {
        for k in 0..j {
            let proj = m.column(k).dot(&m.column(j));
            let qk = m.column(k).clone_owned();
            m.column_mut(j).axpy(-proj, &qk, 1.0);
        }
        let norm = m.column(j).norm();
        if norm < 1e-12 {
            return Err(Error::InvalidArgument(format!("column {j} is numerically dependent")));
        }
        m.column_mut(j).unscale_mut(norm);
    }
    Ok(m)
}

/// How far a classifier is from a simplex ETF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtfMetrics {
    /// Coefficient of variation of the row norms.
    pub norm_cv: f64,
    /// Standard deviation of pairwise cosines over ordered pairs of distinct rows.
    pub cosine_std: f64,
}

/// Population standard deviation.
fn pop_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn etf_deviation_metrics(w: &DMatrix<f64>) -> Result<EtfMetrics> {
    let c = w.nrows();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 rows, got {c}")));
    }
    let norms: Vec<f64> = w.row_iter().map(|r| r.norm()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroRow(i));
    }
    let mean_norm = norms.iter().sum::<f64>() / c as f64;
    let norm_cv = pop_std(&norms) / mean_norm;

    let mut cosines = Vec::with_capacity(c * (c - 1));
    for i in 0..c {
        for j in 0..c {
            if i != j {
                cosines.push(w.row(i).dot(&w.row(j)) / (norms[i] * norms[j]));
            }
        }
    }
    Ok(EtfMetrics { norm_cv, cosine_std: pop_std(&cosines) })
}
