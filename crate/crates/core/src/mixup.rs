//! Mixup coefficients, mixed pairs, and mixed batches.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric `Beta(alpha, alpha)` distribution of the mixing coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSpec {
    alpha: f64,
}

impl BetaSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    SameClass,
    DifferentClass,
}

impl MixKind {
    pub fn from_labels(a: usize, b: usize) -> Self {
        if a == b {
            MixKind::SameClass
        } else {
            MixKind::DifferentClass
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MixKind::SameClass => "same_class",
            MixKind::DifferentClass => "different_class",
        }
    }
}

impl std::str::FromStr for MixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_class" => Ok(MixKind::SameClass),
            "different_class" => Ok(MixKind::DifferentClass),
            other => Err(Error::InvalidArgument(format!("unknown mix kind `{other}`"))),
        }
    }
}

/// One mixed example: `x = λ x_i + (1-λ) x_j`, `y = λ y_i + (1-λ) y_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
    /// Hard label of the first source.
    pub class_i: usize,
    /// Hard label of the second source.
    pub class_j: usize,
    /// Dataset indices of the two sources, when drawn from a dataset.
    pub pair: Option<(usize, usize)>,
    pub kind: MixKind,
}

/// One draw from `Beta(alpha, alpha)` as `g1 / (g1 + g2)` with independent gamma draws.
pub fn sample_lambda<R: Rng + ?Sized>(spec: &BetaSpec, rng: &mut R) -> f64 {
    let gamma = Gamma::new(spec.alpha, 1.0).expect("alpha validated at construction");
    loop {
        let g1: f64 = gamma.sample(rng);
        let g2: f64 = gamma.sample(rng);
        let total = g1 + g2;
        // both draws can underflow to zero for very small alpha
        if total > 0.0 {
            return g1 / total;
        }
    }
}

fn one_hot_label(y: &[f64]) -> Result<usize> {
    let mut label = None;
    for (k, &v) in y.iter().enumerate() {
        if v == 1.0 && label.is_none() {
            label = Some(k);
        } else if v != 0.0 {
            return Err(Error::InvalidArgument("label vector is not one-hot".into()));
        }
    }
    label.ok_or_else(|| Error::InvalidArgument("label vector is not one-hot".into()))
}

pub fn mix_pair(x_i: &[f64], y_i: &[f64], x_j: &[f64], y_j: &[f64], lambda: f64) -> Result<MixupSample> {
    if x_i.len() != x_j.len() {
        return Err(Error::DimensionMismatch { expected: x_i.len(), got: x_j.len() });
    }
    if y_i.len() != y_j.len() {
        return Err(Error::DimensionMismatch { expected: y_i.len(), got: y_j.len() });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let class_i = one_hot_label(y_i)?;
    let class_j = one_hot_label(y_j)?;
    Ok(MixupSample {
        x: convex(x_i, x_j, lambda),
        y: convex(y_i, y_j, lambda),
        lambda,
        class_i,
        class_j,
        pair: None,
        kind: MixKind::from_labels(class_i, class_j),
    })
}

fn convex(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect()
}

pub(crate) fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    y[label] = 1.0;
    y
}

/// Draws `batch_size` mixed samples; each pairs two indices drawn uniformly
/// with replacement and uses its own coefficient.
pub fn make_mixup_batch<R: Rng + ?Sized>(
    inputs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    spec: &BetaSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<MixupSample>> {
    if inputs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::ClassOutOfRange { index: bad, num_classes });
    }
    let n = inputs.len();
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let lambda = sample_lambda(spec, rng);
        let mut sample = mix_pair(
            &inputs[a],
            &one_hot(labels[a], num_classes),
            &inputs[b],
            &one_hot(labels[b], num_classes),
            lambda,
        )?;
        sample.pair = Some((a, b));
        batch.push(sample);
    }
    Ok(batch)
}
