//! Unconstrained-features objective for mixup with a fixed classifier.
//!
//! For a feature `h` tagged with classes `(i, i')` and coefficient `λ` the
//! per-sample objective is
//! `-λ log p_i - (1-λ) log p_i' + (λ_H / 2) |h|²` with `p = softmax(W h)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theory::FeatureRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UfmConfig {
    /// Feature decay.
    pub lambda_h: f64,
    /// Classifier decay; only enters the reported classifier penalty.
    pub lambda_w: f64,
}

impl UfmConfig {
    pub fn new(lambda_h: f64, lambda_w: f64) -> Result<Self> {
        if !(lambda_h > 0.0 && lambda_h.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_h must be positive, got {lambda_h}")));
        }
        if !(lambda_w >= 0.0 && lambda_w.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_w must be nonnegative, got {lambda_w}")));
        }
        Ok(Self { lambda_h, lambda_w })
    }
}

fn check_dims(w: &DMatrix<f64>, h: &DVector<f64>) {
    assert_eq!(w.ncols(), h.len(), "feature dimension does not match classifier");
}

/// Log-softmax of `logits` computed through log-sum-exp.
pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

pub fn softmax_probs(w: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
    check_dims(w, h);
    let logits = w * h;
    let max = logits.max();
    let mut p = logits.map(|z| (z - max).exp());
    let total = p.sum();
    p.unscale_mut(total);
    p
}

/// Soft target `λ e_i + (1-λ) e_i'`.
pub fn soft_target(num_classes: usize, i: usize, ip: usize, lambda: f64) -> DVector<f64> {
    let mut y = DVector::zeros(num_classes);
    y[i] += lambda;
    y[ip] += 1.0 - lambda;
    y
}

fn cross_entropy(logp: &DVector<f64>, i: usize, ip: usize, lambda: f64) -> f64 {
    if i == ip {
        return -logp[i];
    }
    // canonical order keeps (i, i', λ) and (i', i, 1-λ) bit-identical
    let (lo, hi, w_lo) = if i < ip { (i, ip, lambda) } else { (ip, i, 1.0 - lambda) };
    let w_hi = 1.0 - w_lo;
    -(w_lo * logp[lo]) - w_hi * logp[hi]
}

pub fn per_sample_loss(w: &DMatrix<f64>, h: &DVector<f64>, i: usize, ip: usize, lambda: f64, cfg: &UfmConfig) -> f64 {
    check_dims(w, h);
    let logp = log_softmax(&(w * h));
    cross_entropy(&logp, i, ip, lambda) + 0.5 * cfg.lambda_h * h.norm_squared()
}

/// `Wᵀ (p - y) + λ_H h`.
pub fn per_sample_grad(
    w: &DMatrix<f64>,
    h: &DVector<f64>,
    i: usize,
    ip: usize,
    lambda: f64,
    cfg: &UfmConfig,
) -> DVector<f64> {
    let p = softmax_probs(w, h);
    let residual = p - soft_target(w.nrows(), i, ip, lambda);
    w.tr_mul(&residual) + h * cfg.lambda_h
}

/// `Wᵀ (diag p - p pᵀ) W + λ_H I`.
fn per_sample_hessian(w: &DMatrix<f64>, h: &DVector<f64>, cfg: &UfmConfig) -> DMatrix<f64> {
    let p = softmax_probs(w, h);
    let cov = DMatrix::from_diagonal(&p) - &p * p.transpose();
    let d = w.ncols();
    w.tr_mul(&(cov * w)) + DMatrix::<f64>::identity(d, d) * cfg.lambda_h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentMethod {
    /// Steepest descent.
    Gradient,
    /// Newton direction from the analytic Hessian.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub method: DescentMethod,
    /// Initial trial step of each line search.
    pub step_size: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub armijo: f64,
    pub shrink: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            method: DescentMethod::Newton,
            step_size: 1.0,
            max_iter: 100_000,
            grad_tol: 1e-10,
            armijo: 1e-4,
            shrink: 0.5,
        }
    }
}

/// Descent with backtracking line search on the per-sample objective.
///
/// The objective is strictly convex in `h`, so the minimizer is unique.
pub fn minimize_per_sample(
    w: &DMatrix<f64>,
    i: usize,
    ip: usize,
    lambda: f64,
    cfg: &UfmConfig,
    init: &DVector<f64>,
    opts: &MinimizeOptions,
) -> Result<DVector<f64>> {
    let c = w.nrows();
    for idx in [i, ip] {
        if idx >= c {
            return Err(Error::ClassOutOfRange { index: idx, num_classes: c });
        }
    }
    if init.len() != w.ncols() {
        return Err(Error::DimensionMismatch { expected: w.ncols(), got: init.len() });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }

    let loss = |h: &DVector<f64>| per_sample_loss(w, h, i, ip, lambda, cfg);
    let grad = |h: &DVector<f64>| per_sample_grad(w, h, i, ip, lambda, cfg);

    let mut h = init.clone();
    let mut f = loss(&h);
    let mut g = grad(&h);
    for _ in 0..opts.max_iter {
        let g_norm = g.norm();
        if g_norm <= opts.grad_tol {
            return Ok(h);
        }
        let direction = match opts.method {
            DescentMethod::Gradient => -&g,
            DescentMethod::Newton => {
                per_sample_hessian(w, &h, cfg).cholesky().map(|chol| -chol.solve(&g)).unwrap_or_else(|| -&g)
            }
        };
        let slope = g.dot(&direction);
        let mut t = opts.step_size;
        loop {
            let candidate = &h + &direction * t;
            let f_new = loss(&candidate);
            let sufficient = f_new <= f + opts.armijo * t * slope;
            // near the optimum the decrease drops below roundoff; fall back on the gradient
            let g_new = grad(&candidate);
            if sufficient
                || (opts.method == DescentMethod::Newton && t == opts.step_size && g_new.norm() < 0.5 * g_norm)
            {
                h = candidate;
                f = f_new;
                g = g_new;
                break;
            }
            t *= opts.shrink;
            if t < 1e-30 {
                return Err(Error::NoConvergence { iterations: opts.max_iter, grad_norm: g_norm });
            }
        }
    }
    let grad_norm = g.norm();
    if grad_norm <= opts.grad_tol {
        Ok(h)
    } else {
        Err(Error::NoConvergence { iterations: opts.max_iter, grad_norm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    /// Mean of the per-sample objective over all records.
    pub mean_per_sample: f64,
    /// `(λ_W / 2) |W|_F²`.
    pub classifier_penalty: f64,
}

pub fn total_objective(w: &DMatrix<f64>, features: &[FeatureRecord], cfg: &UfmConfig) -> Result<ObjectiveReport> {
    if features.is_empty() {
        return Err(Error::Empty("feature list"));
    }
    let c = w.nrows();
    let mut sum = 0.0;
    for rec in features {
        for idx in [rec.class_i, rec.class_ip] {
            if idx >= c {
                return Err(Error::ClassOutOfRange { index: idx, num_classes: c });
            }
        }
        if rec.h.len() != w.ncols() {
            return Err(Error::DimensionMismatch { expected: w.ncols(), got: rec.h.len() });
        }
        sum += per_sample_loss(w, &rec.h, rec.class_i, rec.class_ip, rec.lambda, cfg);
    }
    Ok(ObjectiveReport {
        mean_per_sample: sum / features.len() as f64,
        classifier_penalty: 0.5 * cfg.lambda_w * w.norm_squared(),
    })
}
