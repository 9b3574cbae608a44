//! Planar view of features for a chosen three-class subset.
//!
//! The classifier rows of the three classes are normalized, `W* = U S Vᵀ`, and
//! features are mapped through `A Q (h - center)` with `Q = U Vᵀ` and `A` the
//! vertices of an equilateral triangle.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixup::MixKind;
use crate::theory::FeatureRecord;

/// Squared singular values below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator {
    pub classes: [usize; 3],
    /// `3 x d` with orthonormal rows.
    pub q: DMatrix<f64>,
    /// Triangle vertices as columns.
    pub a: Matrix2x3<f64>,
    pub center: DVector<f64>,
}

/// Unit vertices `(0, 1)`, `(-√3/2, -1/2)`, `(√3/2, -1/2)`.
pub fn triangle_vertices() -> Matrix2x3<f64> {
    let s = 3f64.sqrt() / 2.0;
    Matrix2x3::new(0.0, -s, s, 1.0, -0.5, -0.5)
}

/// Mean of the features, used as the projection center for empirical activations.
pub fn feature_mean(features: &[FeatureRecord]) -> Result<DVector<f64>> {
    let first = features.first().ok_or(Error::Empty("feature list"))?;
    let mut sum = DVector::zeros(first.h.len());
    for rec in features {
        if rec.h.len() != sum.len() {
            return Err(Error::DimensionMismatch { expected: sum.len(), got: rec.h.len() });
        }
        sum += &rec.h;
    }
    Ok(sum / features.len() as f64)
}

fn flip_to_positive_peak(u: &mut nalgebra::Vector3<f64>) -> bool {
    let mut peak = 0;
    for k in 1..3 {
        if u[k].abs() > u[peak].abs() {
            peak = k;
        }
    }
    if u[peak] < 0.0 {
        *u = -*u;
        true
    } else {
        false
    }
}

/// Unit vector orthogonal to `basis`, found by Gram-Schmidt over the standard basis.
fn complete_orthonormal(basis: &[DVector<f64>], dim: usize) -> Result<DVector<f64>> {
    for e in 0..dim {
        let mut v = DVector::zeros(dim);
        v[e] = 1.0;
        for b in basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        // second pass for orthogonality to working precision
        for b in basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm > 0.5 {
            return Ok(v / norm);
        }
    }
    Err(Error::InvalidArgument(format!("cannot complete a basis of size {} in dimension {dim}", basis.len())))
}

pub fn build_projection(
    classes: [usize; 3],
    w_rows: &DMatrix<f64>,
    activation_mean: &DVector<f64>,
) -> Result<ProjectionOperator> {
    if w_rows.nrows() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: w_rows.nrows() });
    }
    let d = w_rows.ncols();
    if d < 3 {
        return Err(Error::InvalidArgument(format!("feature dimension {d} is below 3")));
    }
    if activation_mean.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: activation_mean.len() });
    }
    let mut normalized = w_rows.clone();
    for (k, mut row) in normalized.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::ZeroRow(k));
        }
        row.unscale_mut(norm);
    }

    // W* W*ᵀ = U S² Uᵀ gives the left singular vectors directly.
    let gram: Matrix3<f64> = Matrix3::from_fn(|r, c| normalized.row(r).dot(&normalized.row(c)));
    let eig = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let top = eig.eigenvalues[order[0]];
    if top.is_nan() || top <= 0.0 {
        return Err(Error::InvalidArgument("classifier rows are numerically rank zero".into()));
    }

    let lambda_max = eig.eigenvalues[order[0]];
    let mut left = Vec::with_capacity(3);
    let mut right: Vec<DVector<f64>> = Vec::with_capacity(3);
    for &k in &order {
        let mut u = eig.eigenvectors.column(k).into_owned();
        flip_to_positive_peak(&mut u);
        let sigma2 = eig.eigenvalues[k];
        let v = if sigma2 > RANK_TOL * lambda_max {
            let v = normalized.tr_mul(&DVector::from_column_slice(u.as_slice())) / sigma2.sqrt();
            // re-orthogonalize against the stronger directions
            let mut v = v;
            for prev in &right {
                let proj = prev.dot(&v);
                v.axpy(-proj, prev, 1.0);
            }
            let norm = v.norm();
            if norm > 0.5 {
                v / norm
            } else {
                complete_orthonormal(&right, d)?
            }
        } else {
            complete_orthonormal(&right, d)?
        };
        right.push(v);
        left.push(u);
    }

    let mut q = DMatrix::zeros(3, d);
    for (u, v) in left.iter().zip(&right) {
        q += DVector::from_column_slice(u.as_slice()) * v.transpose();
    }
    Ok(ProjectionOperator { classes, q, a: triangle_vertices(), center: activation_mean.clone() })
}

/// A projected feature with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub class_i: usize,
    pub class_ip: usize,
    pub lambda: f64,
    pub kind: MixKind,
    pub amplified: bool,
    pub px: f64,
    pub py: f64,
}

impl ProjectionOperator {
    pub fn project_vector(&self, h: &DVector<f64>) -> Result<Vector2<f64>> {
        if h.len() != self.q.ncols() {
            return Err(Error::DimensionMismatch { expected: self.q.ncols(), got: h.len() });
        }
        let coords = &self.q * (h - &self.center);
        Ok(self.a * nalgebra::Vector3::new(coords[0], coords[1], coords[2]))
    }
}

pub fn project(op: &ProjectionOperator, features: &[FeatureRecord]) -> Result<Vec<ProjectedPoint>> {
    features
        .iter()
        .map(|rec| {
            let p = op.project_vector(&rec.h)?;
            Ok(ProjectedPoint {
                class_i: rec.class_i,
                class_ip: rec.class_ip,
                lambda: rec.lambda,
                kind: rec.kind,
                amplified: rec.amplified,
                px: p[0],
                py: p[1],
            })
        })
        .collect()
}
