//! Detection metrics and threshold utilities.

use crate::error::{Error, Result};
use serde::Serialize;

/// Confusion counts plus precision/recall/F1. `degenerate` marks results
/// where a zero denominator forced a score of 0.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

/// F1 = 2pr/(p+r) with p = TP/(TP+FP), r = TP/(TP+FN). Zero denominators
/// yield 0 with the degenerate flag set.
pub fn f1_score(predicted: &[bool], truth: &[bool]) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::SizeMismatch { expected: truth.len(), got: predicted.len() });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = false;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        degenerate = true;
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        degenerate = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(Metrics { tp, fp, fn_, tn, precision, recall, f1, degenerate })
}

/// Empirical q-quantile with linear interpolation between order statistics
/// (the type-7 convention): q=0 gives the minimum, q=1 the maximum.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of empty vector"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::OutOfRange(format!("quantile q={q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n && frac > 0.0 {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    } else {
        Ok(sorted[lo])
    }
}
