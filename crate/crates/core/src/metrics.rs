//! Top-k accuracy and average incremental accuracy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of rows whose label is among the `k` largest logits. Equal
/// logits rank the lower class index first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let op = "topk_accuracy";
    if labels.is_empty() {
        return Err(Error::invalid(op, "empty evaluation set"));
    }
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::shape(op, format!("logits {:?} for {} labels", logits.shape(), labels.len())));
    }
    let classes = logits.dim(1);
    if k == 0 || k > classes {
        return Err(Error::invalid(op, format!("k = {k} with {classes} classes")));
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(op, format!("label {y} outside {classes} classes")));
        }
        let row = logits.row(i);
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > target || (v == target && c < y))
            .count();
        hits += usize::from(rank < k);
    }
    Ok(hits as f64 / labels.len() as f64)
}

pub fn average_incremental_accuracy(per_step: &[f64]) -> Result<f64> {
    if per_step.is_empty() {
        return Err(Error::invalid("average_incremental_accuracy", "no steps"));
    }
    Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

/// Fraction to percent, rounded to two decimals.
pub fn percent2(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}
