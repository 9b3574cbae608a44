//! Expected calibration error with equal-width confidence bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainedModel;

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    /// Fraction of correct predictions; 0 for an empty bin.
    pub accuracy: f64,
    /// Mean confidence; 0 for an empty bin.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub num_bins: usize,
    pub bin_edges: Vec<f64>,
    pub bins: Vec<BinStat>,
    pub ece: f64,
}

impl CalibrationReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ (|B_m| / n) |acc(B_m) - conf(B_m)|` from the stored bins.
    pub fn weighted_gap(&self) -> f64 {
        let n = self.total() as f64;
        self.bins.iter().filter(|b| b.count > 0).map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs()).sum()
    }
}

/// Bin of a confidence: `[k/M, (k+1)/M)`, with the last bin closed at 1.
pub fn bin_index(confidence: f64, edges: &[f64]) -> usize {
    let m = edges.len() - 1;
    let mut k = ((confidence * m as f64).floor() as usize).min(m - 1);
    while k > 0 && confidence < edges[k] {
        k -= 1;
    }
    while k + 1 < m && confidence >= edges[k + 1] {
        k += 1;
    }
    k
}

pub fn ece(confidences: &[f64], predicted: &[usize], labels: &[usize], num_bins: usize) -> Result<CalibrationReport> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if predicted.len() != confidences.len() {
        return Err(Error::DimensionMismatch { expected: confidences.len(), got: predicted.len() });
    }
    if labels.len() != confidences.len() {
        return Err(Error::DimensionMismatch { expected: confidences.len(), got: labels.len() });
    }
    if confidences.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if let Some(bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {bad} outside [0, 1]")));
    }

    let edges: Vec<f64> = (0..=num_bins).map(|k| k as f64 / num_bins as f64).collect();
    let mut counts = vec![0usize; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    for ((&c, &p), &y) in confidences.iter().zip(predicted).zip(labels) {
        let k = bin_index(c, &edges);
        counts[k] += 1;
        conf_sum[k] += c;
        if p == y {
            correct[k] += 1;
        }
    }
    let bins: Vec<BinStat> = (0..num_bins)
        .map(|k| {
            if counts[k] == 0 {
                BinStat { count: 0, accuracy: 0.0, confidence: 0.0 }
            } else {
                BinStat {
                    count: counts[k],
                    accuracy: correct[k] as f64 / counts[k] as f64,
                    confidence: conf_sum[k] / counts[k] as f64,
                }
            }
        })
        .collect();
    let mut report = CalibrationReport { num_bins, bin_edges: edges, bins, ece: 0.0 };
    report.ece = report.weighted_gap();
    Ok(report)
}

/// Max softmax probability and its class (lowest index on ties) for each logit vector.
pub fn confidences_from_logits<'a, I>(logits: I) -> (Vec<f64>, Vec<usize>)
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut conf = Vec::new();
    let mut pred = Vec::new();
    for z in logits {
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        let denom: f64 = z.iter().map(|v| (v - z[best]).exp()).sum();
        conf.push(1.0 / denom);
        pred.push(best);
    }
    (conf, pred)
}

/// Confidences and predictions of a trained model on labelled inputs.
pub fn model_confidences(
    model: &TrainedModel,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: labels.len() });
    }
    let logits = model.logits(inputs)?;
    let rows: Vec<Vec<f64>> = logits.row_iter().map(|r| r.iter().copied().collect()).collect();
    let (conf, pred) = confidences_from_logits(rows.iter().map(|r| r.as_slice()));
    Ok((conf, pred, labels.to_vec()))
}
