//! Closed-form optimal features of the unconstrained-features mixup model
//! with a simplex-ETF classifier.
//!
//! Every optimal feature lives in the span of at most two classifier rows and
//! is pinned down by its inner products with the rows:
//!
//! * same class `(i, i)`: `⟨w_i, h⟩ = (1-C) K` and `⟨w_j, h⟩ = K` for `j ≠ i`,
//!   where `K < 0` solves `e^{-CK} - C m² / ((1-C) λ_H K) + C - 1 = 0`;
//! * different classes `(i, i')`: `⟨w_j, h⟩ = K_λ` for every `j ∉ {i, i'}` and
//!   `⟨w_i, h⟩ + ⟨w_i', h⟩ = -(C-2) K_λ`.
//!
//! Writing `κ = (C-1) λ_H / (C m²)`, stationarity reduces to
//! `p - y + κ z = 0` on the logits `z = W h`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::SimplexEtf;
use crate::mixup::MixKind;
use crate::roots::{bisect, bracket_negative};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub num_classes: usize,
    pub multiplier: f64,
    pub lambda_h: f64,
    pub feature_dim: usize,
}

impl TheoryParams {
    pub fn new(num_classes: usize, multiplier: f64, lambda_h: f64, feature_dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
        }
        if feature_dim < num_classes {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {feature_dim} is smaller than the number of classes {num_classes}"
            )));
        }
        if multiplier == 0.0 || !multiplier.is_finite() {
            return Err(Error::InvalidArgument(format!("multiplier must be finite and nonzero, got {multiplier}")));
        }
        if !(lambda_h > 0.0 && lambda_h.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_h must be positive, got {lambda_h}")));
        }
        Ok(Self { num_classes, multiplier, lambda_h, feature_dim })
    }

    fn c(&self) -> f64 {
        self.num_classes as f64
    }

    fn m2(&self) -> f64 {
        self.multiplier * self.multiplier
    }

    /// `(C-1) λ_H / (C m²)`: maps logits to the decay term of the stationarity condition.
    pub fn kappa(&self) -> f64 {
        (self.c() - 1.0) * self.lambda_h / (self.c() * self.m2())
    }

    fn check_etf(&self, etf: &SimplexEtf) -> Result<()> {
        if etf.num_classes() != self.num_classes
            || etf.feature_dim() != self.feature_dim
            || etf.multiplier() != self.multiplier
        {
            return Err(Error::InvalidArgument(format!(
                "classifier (C={}, d={}, m={}) does not match parameters (C={}, d={}, m={})",
                etf.num_classes(),
                etf.feature_dim(),
                etf.multiplier(),
                self.num_classes,
                self.feature_dim,
                self.multiplier
            )));
        }
        Ok(())
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Softmax over `(a, a', K repeated C-2 times)`, returned as `(p_a, p_a', p_tail, ln S)`.
fn reduced_softmax(c: usize, a: f64, ap: f64, k: f64) -> (f64, f64, f64, f64) {
    let mut log_s = log_add_exp(a, ap);
    if c > 2 {
        log_s = log_add_exp(log_s, k + ((c - 2) as f64).ln());
    }
    let p_tail = if c > 2 { (k - log_s).exp() } else { 0.0 };
    ((a - log_s).exp(), (ap - log_s).exp(), p_tail, log_s)
}

/// Gradient norm at a feature in the span of the rows, computed from its logits.
///
/// With `h = Wᵀ c` the gradient is `Wᵀ r` for `r = p - y + κ z`, and
/// `|Wᵀ r|² = m² C/(C-1) (|r|² - (Σ r)² / C)`.
fn reduced_gradient_norm(params: &TheoryParams, r_i: f64, r_ip: f64, r_tail: f64) -> f64 {
    let c = params.c();
    let tail = c - 2.0;
    let sq = r_i * r_i + r_ip * r_ip + tail * r_tail * r_tail;
    let sum = r_i + r_ip + tail * r_tail;
    let value = params.m2() * c / (c - 1.0) * (sq - sum * sum / c);
    value.max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SameClassSolution {
    pub params: TheoryParams,
    /// Negative root `K`.
    pub k: f64,
    /// `⟨w_i, h_ii⟩ = (1-C) K`.
    pub inner_self: f64,
    /// `⟨w_j, h_ii⟩ = K` for `j ≠ i`.
    pub inner_tail: f64,
    /// `h_ii = coeff · w_i`, with `coeff = (1-C) K / m²`.
    pub coeff: f64,
    /// Root residual in log form, `|-CK - ln(C m² / ((C-1) λ_H |K|) - C + 1)|`.
    pub residual: f64,
    /// Gradient norm of the per-sample objective at `h_ii`.
    pub stationarity: f64,
}

/// `f(K) = e^{-CK} - C m² / ((1-C) λ_H K) + C - 1`, strictly decreasing on `K < 0`.
pub fn same_class_characteristic(params: &TheoryParams, k: f64) -> f64 {
    let c = params.c();
    (-c * k).exp() - c * params.m2() / ((1.0 - c) * params.lambda_h * k) + c - 1.0
}

/// `-CK - ln(C m² / ((C-1) λ_H |K|) - C + 1)`; same sign and root as the
/// characteristic function, `+∞` where the logarithm's argument is not positive.
pub fn same_class_log_characteristic(params: &TheoryParams, k: f64) -> f64 {
    let c = params.c();
    let arg = 1.0 / (params.kappa() * (-k)) - (c - 1.0);
    if arg <= 0.0 {
        f64::INFINITY
    } else {
        -c * k - arg.ln()
    }
}

pub fn solve_same_class(params: &TheoryParams) -> Result<SameClassSolution> {
    let g = |k: f64| same_class_log_characteristic(params, k);
    let (lo, hi) = bracket_negative(g)?;
    let k = bisect(g, lo, hi, 0.0)?;
    if k.is_nan() || k >= 0.0 {
        return Err(Error::Bracket(format!("same-class root {k} is not negative")));
    }
    let c = params.num_classes;
    let inner_self = (1.0 - params.c()) * k;
    // the second slot of the pair holds one of the other classes
    let (p_self, p_other, p_tail, _) = reduced_softmax(c, inner_self, k, k);
    let kappa = params.kappa();
    let stationarity =
        reduced_gradient_norm(params, p_self - 1.0 + kappa * inner_self, p_other + kappa * k, p_tail + kappa * k);
    Ok(SameClassSolution {
        params: *params,
        k,
        inner_self,
        inner_tail: k,
        coeff: inner_self / params.m2(),
        residual: g(k).abs(),
        stationarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferentClassSolution {
    pub params: TheoryParams,
    pub lambda: f64,
    /// Common logit `⟨w_j, h⟩` of the classes outside the pair; `None` when `C = 2`.
    pub k_lambda: Option<f64>,
    /// `⟨w_i, h⟩`.
    pub inner_i: f64,
    /// `⟨w_i', h⟩`.
    pub inner_ip: f64,
    pub p_i: f64,
    pub p_ip: f64,
    /// Softmax mass on each class outside the pair.
    pub p_tail: f64,
    /// `S = Σ_k exp⟨w_k, h⟩`.
    pub partition_s: f64,
    /// `h = coeff_i · w_i + coeff_ip · w_i'`.
    pub coeff_i: f64,
    pub coeff_ip: f64,
    /// Gradient norm of the per-sample objective at the assembled feature.
    pub residual: f64,
}

impl DifferentClassSolution {
    /// `|e^{⟨w_i,h⟩} / (S p_i) - 1|`, where `S = C m² e^{K_λ} / ((1-C) K_λ λ_H)` and
    /// `p_i = λ + (1-C) λ_H ⟨w_i,h⟩ / (C m²)`.
    pub fn fixed_point_residual(&self) -> Option<f64> {
        let k = self.k_lambda?;
        let params = &self.params;
        let c = params.c();
        let log_s = (c * params.m2() / ((1.0 - c) * k * params.lambda_h)).ln() + k;
        let p_i = self.lambda - params.kappa() * self.inner_i;
        Some(((self.inner_i - log_s).exp() / p_i - 1.0).abs())
    }

    /// Logits of the two roots of the quadratic in `e^{⟨w_i,h⟩}`,
    /// `x² + e^{K}(C - 2 - C m² / ((1-C) K λ_H)) x + e^{-(C-2)K} = 0`,
    /// as `(larger, smaller)`; `None` for a negative discriminant or `C = 2`.
    pub fn quadratic_root_logits(&self) -> Option<(f64, f64)> {
        quadratic_root_logits(&self.params, self.k_lambda?)
    }
}

/// Roots of the quadratic in `x = e^{⟨w_i,h⟩}` for a candidate `K`, as logits.
///
/// Substituting `x = e^K y` gives `y² - b y + e^{-CK} = 0` with
/// `b = C m² / ((C-1) λ_H |K|) - (C-2)`; the small root is taken from the
/// product of roots to avoid cancellation.
pub fn quadratic_root_logits(params: &TheoryParams, k: f64) -> Option<(f64, f64)> {
    if params.num_classes < 3 || k.is_nan() || k >= 0.0 {
        return None;
    }
    let c = params.c();
    let b = 1.0 / (params.kappa() * (-k)) - (c - 2.0);
    if b <= 0.0 {
        return None;
    }
    // q = 4 e^{-CK} / b²
    let log_q = 4f64.ln() - c * k - 2.0 * b.ln();
    if log_q > 0.0 {
        return None;
    }
    let q = log_q.exp();
    let log_big = (0.5 * b * (1.0 + (1.0 - q).sqrt())).ln();
    let log_small = -c * k - log_big;
    Some((k + log_big, k + log_small))
}

/// Solution of the different-class problem in terms of the logit gap
/// `δ = ⟨w_i,h⟩ - ⟨w_i',h⟩ ≥ 0`.
struct GapSolution {
    k: f64,
    hi: f64,
    lo: f64,
    lambda: f64,
}

/// For a fixed gap the tail equation `κ |K| (2 e^{-CK/2} cosh(δ/2) + C - 2) = 1`
/// has exactly one negative root, and the coefficient follows from the
/// difference of the two pair equations.
fn solve_gap(params: &TheoryParams, delta: f64) -> Result<GapSolution> {
    let c = params.num_classes;
    let kappa = params.kappa();
    let k = if c == 2 {
        0.0
    } else {
        let cf = params.c();
        let log_tail = ((c - 2) as f64).ln();
        let phi = |k: f64| {
            let log_pair = -cf * k / 2.0 + delta / 2.0 + (-delta).exp().ln_1p();
            (kappa * (-k)).ln() + log_add_exp(log_pair, log_tail)
        };
        let (lo, hi) = bracket_negative(phi)?;
        bisect(phi, lo, hi, 0.0)?
    };
    let base = -((c - 2) as f64) * k / 2.0;
    let hi = base + delta / 2.0;
    let lo = base - delta / 2.0;
    let (p_hi, p_lo, _, _) = reduced_softmax(c, hi, lo, k);
    let lambda = 0.5 * (1.0 + kappa * delta + p_hi - p_lo);
    Ok(GapSolution { k, hi, lo, lambda })
}

/// Gap solution for a coefficient `mu ∈ [1/2, 1)`.
fn solve_for_coefficient(params: &TheoryParams, mu: f64) -> Result<GapSolution> {
    if mu == 0.5 {
        return solve_gap(params, 0.0);
    }
    let mut upper = 1.0;
    let mut found = false;
    for _ in 0..1100 {
        if solve_gap(params, upper)?.lambda >= mu {
            found = true;
            break;
        }
        upper *= 2.0;
    }
    if !found {
        return Err(Error::Bracket(format!("no logit gap reaches coefficient {mu}")));
    }
    let mut failure = None;
    let delta = bisect(
        |d| match solve_gap(params, d) {
            Ok(s) => s.lambda - mu,
            Err(e) => {
                failure = Some(e.to_string());
                f64::NAN
            }
        },
        0.0,
        upper,
        0.0,
    )
    .map_err(|e| match failure.take() {
        Some(inner) => Error::Bracket(format!("{e}; inner solve failed: {inner}")),
        None => e,
    })?;
    solve_gap(params, delta)
}

pub fn solve_different_class(params: &TheoryParams, lambda: f64) -> Result<DifferentClassSolution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let c = params.num_classes;
    let (k, inner_i, inner_ip) = if lambda == 1.0 || lambda == 0.0 {
        let same = solve_same_class(params)?;
        if lambda == 1.0 {
            (same.k, same.inner_self, same.inner_tail)
        } else {
            (same.k, same.inner_tail, same.inner_self)
        }
    } else {
        let mu = lambda.max(1.0 - lambda);
        let gap = solve_for_coefficient(params, mu)?;
        if lambda >= 0.5 {
            (gap.k, gap.hi, gap.lo)
        } else {
            (gap.k, gap.lo, gap.hi)
        }
    };
    let k_lambda = if c == 2 && lambda != 0.0 && lambda != 1.0 { None } else { Some(k) };
    let (p_i, p_ip, p_tail, log_s) = reduced_softmax(c, inner_i, inner_ip, k);
    let kappa = params.kappa();
    let residual = reduced_gradient_norm(
        params,
        p_i - lambda + kappa * inner_i,
        p_ip - (1.0 - lambda) + kappa * inner_ip,
        p_tail + kappa * k,
    );
    let scale = (1.0 - params.c()) / (params.c() * params.m2());
    let k_coeff = k_lambda.unwrap_or(0.0);
    Ok(DifferentClassSolution {
        params: *params,
        lambda,
        k_lambda,
        inner_i,
        inner_ip,
        p_i,
        p_ip,
        p_tail,
        partition_s: log_s.exp(),
        coeff_i: scale * (k_coeff - inner_i),
        coeff_ip: scale * (k_coeff - inner_ip),
        residual,
    })
}

/// Summary of the closed form behind a theory feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    /// `K` for same-class records, `K_λ` otherwise (`None` for two classes).
    pub k: Option<f64>,
    /// `⟨w_i, h⟩`.
    pub inner_i: f64,
    pub coeff_i: f64,
    pub coeff_ip: f64,
}

/// A last-layer feature tagged with its mixup provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub class_i: usize,
    pub class_ip: usize,
    pub lambda: f64,
    pub h: DVector<f64>,
    pub kind: MixKind,
    pub amplified: bool,
    pub closed_form: Option<ClosedForm>,
}

impl FeatureRecord {
    pub fn new(class_i: usize, class_ip: usize, lambda: f64, h: DVector<f64>, amplified: bool) -> Self {
        Self {
            class_i,
            class_ip,
            lambda,
            h,
            kind: MixKind::from_labels(class_i, class_ip),
            amplified,
            closed_form: None,
        }
    }
}

fn check_index(i: usize, c: usize) -> Result<()> {
    if i >= c {
        Err(Error::ClassOutOfRange { index: i, num_classes: c })
    } else {
        Ok(())
    }
}

/// `h_ii = ((1-C) K / m²) w_i`.
pub fn assemble_same_class(sol: &SameClassSolution, etf: &SimplexEtf, i: usize, lambda: f64) -> Result<FeatureRecord> {
    sol.params.check_etf(etf)?;
    check_index(i, etf.num_classes())?;
    let mut rec = FeatureRecord::new(i, i, lambda, etf.row(i) * sol.coeff, false);
    rec.closed_form = Some(ClosedForm { k: Some(sol.k), inner_i: sol.inner_self, coeff_i: sol.coeff, coeff_ip: 0.0 });
    Ok(rec)
}

/// `h = coeff_i w_i + coeff_ip w_i'` with
/// `coeff = (1-C)/(C m²) (K_λ - ⟨w, h⟩)` for each of the two rows.
pub fn assemble_different_class(
    sol: &DifferentClassSolution,
    etf: &SimplexEtf,
    i: usize,
    ip: usize,
) -> Result<FeatureRecord> {
    sol.params.check_etf(etf)?;
    check_index(i, etf.num_classes())?;
    check_index(ip, etf.num_classes())?;
    if i == ip {
        return Err(Error::InvalidArgument(format!("different-class feature needs two classes, got ({i}, {ip})")));
    }
    let h = etf.row(i) * sol.coeff_i + etf.row(ip) * sol.coeff_ip;
    let mut rec = FeatureRecord::new(i, ip, sol.lambda, h, false);
    rec.closed_form =
        Some(ClosedForm { k: sol.k_lambda, inner_i: sol.inner_i, coeff_i: sol.coeff_i, coeff_ip: sol.coeff_ip });
    Ok(rec)
}

/// `ε(λ) = (4/5) exp(-20 (λ - 1/2)⁴) - 2/5`.
pub fn amplification(lambda: f64) -> f64 {
    0.8 * (-20.0 * (lambda - 0.5).powi(4)).exp() - 0.4
}

/// Pushes a different-class feature away from the classes outside its pair:
/// `h̃ = h - ε(λ) Σ_{j ∉ {i, i'}} w_j`. Same-class records are returned unchanged.
pub fn amplify(record: &FeatureRecord, etf: &SimplexEtf) -> Result<FeatureRecord> {
    if record.kind == MixKind::SameClass {
        return Ok(record.clone());
    }
    let c = etf.num_classes();
    check_index(record.class_i, c)?;
    check_index(record.class_ip, c)?;
    if record.h.len() != etf.feature_dim() {
        return Err(Error::DimensionMismatch { expected: etf.feature_dim(), got: record.h.len() });
    }
    let eps = amplification(record.lambda);
    let mut outside = DVector::zeros(etf.feature_dim());
    for j in (0..c).filter(|&j| j != record.class_i && j != record.class_ip) {
        outside += etf.rows().row(j).transpose();
    }
    let h = &record.h - outside * eps;
    let closed_form = record.closed_form.map(|cf| ClosedForm {
        k: cf.k,
        inner_i: etf.rows().row(record.class_i).dot(&h.transpose()),
        coeff_i: cf.coeff_i + eps,
        coeff_ip: cf.coeff_ip + eps,
    });
    Ok(FeatureRecord { h, amplified: true, closed_form, ..record.clone() })
}

/// Optimal features for every ordered pair of `class_subset` at every sampled
/// coefficient, in coefficient-major then pair order. The same coefficient
/// samples are shared by all pairs.
pub fn generate_configuration(
    params: &TheoryParams,
    etf: &SimplexEtf,
    class_subset: &[usize],
    lambda_samples: &[f64],
    amplified: bool,
) -> Result<Vec<FeatureRecord>> {
    params.check_etf(etf)?;
    if class_subset.is_empty() {
        return Err(Error::Empty("class subset"));
    }
    if lambda_samples.is_empty() {
        return Err(Error::Empty("lambda samples"));
    }
    for (n, &i) in class_subset.iter().enumerate() {
        check_index(i, params.num_classes)?;
        if class_subset[..n].contains(&i) {
            return Err(Error::InvalidArgument(format!("class {i} repeated in subset")));
        }
    }
    if let Some(bad) = lambda_samples.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {bad}")));
    }

    let same = solve_same_class(params)?;
    let mut out = Vec::with_capacity(lambda_samples.len() * class_subset.len().pow(2));
    for &lambda in lambda_samples {
        let diff = if class_subset.len() > 1 { Some(solve_different_class(params, lambda)?) } else { None };
        for &i in class_subset {
            for &ip in class_subset {
                let rec = if i == ip {
                    assemble_same_class(&same, etf, i, lambda)?
                } else {
                    let sol = diff.as_ref().expect("solved when the subset has two or more classes");
                    let rec = assemble_different_class(sol, etf, i, ip)?;
                    if amplified {
                        amplify(&rec, etf)?
                    } else {
                        rec
                    }
                };
                out.push(rec);
            }
        }
    }
    Ok(out)
}
