//! Softmax family and the two training losses: supervised cross-entropy and
//! temperature-softened distillation.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(row[0], T::max);
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Row-wise softmax of a `[B×C]` tensor, stabilized by max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let cols = logits.dim(1);
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut s = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `q_c = exp(o_c/τ) / Σ_i exp(o_i/τ)` per row.
pub fn softened_softmax<T: Scalar>(logits: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(
            "softened_softmax",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    if logits.rank() != 2 || logits.is_empty() {
        return Err(Error::shape(
            "softened_softmax",
            format!("expected non-empty [B×C], got {:?}", logits.shape()),
        ));
    }
    let inv = T::from_f64(1.0 / tau);
    Ok(softmax_rows(&logits.map(|v| v * inv)))
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn mean_entropy<T: Scalar>(probs: &Tensor<T>) -> f64 {
    let rows = probs.dim(0);
    let mut total = 0.0;
    for i in 0..rows {
        for &p in probs.row(i) {
            let p = p.to_f64();
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows as f64
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid("one_hot", format!("label {y} outside {classes} classes")));
        }
        t.row_mut(i)[y] = T::ONE;
    }
    Ok(t)
}

/// Batch-mean cross-entropy between softmax(logits) and probability targets.
pub fn softmax_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: Tensor<T>) -> Result<Var> {
    g.softmax_cross_entropy(logits, targets)
}

/// Batch-mean `Σ_c −q_teacher,c · log q_student,c` at temperature `tau`.
///
/// The teacher enters as a plain tensor, so no gradient can reach it.
pub fn distillation_loss<T: Scalar>(g: &mut Graph<T>, student: Var, teacher_logits: &Tensor<T>, tau: f64) -> Result<Var> {
    if g.value(student).shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "distillation_loss",
            format!("student {:?} vs teacher {:?}", g.value(student).shape(), teacher_logits.shape()),
        ));
    }
    let soft_targets = softened_softmax(teacher_logits, tau)?;
    let scaled = g.scale(student, T::from_f64(1.0 / tau))?;
    g.softmax_cross_entropy(scaled, soft_targets)
}
