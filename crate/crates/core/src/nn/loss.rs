use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-wise numerically stable log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let log_probs = log_softmax(logits);
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = log_probs.mapv(f64::exp);
    for (b, &label) in labels.iter().enumerate() {
        loss -= log_probs[[b, label]];
        grad[[b, label]] -= 1.0;
    }
    grad *= scale;
    Ok((loss * scale, grad))
}

/// Mean `KL(teacher || student)` over rows at temperature 1, with the
/// gradient with respect to the student logits. The teacher is constant.
pub fn kl_divergence(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.dim(),
            teacher_logits.dim()
        )));
    }
    let batch = student_logits.nrows();
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let log_s = log_softmax(student_logits);
    let log_t = log_softmax(teacher_logits);
    let p_t = log_t.mapv(f64::exp);
    let per_row: Array1<f64> = (&p_t * &(&log_t - &log_s)).sum_axis(Axis(1));
    // Rounding can make an exactly-zero divergence come out a hair negative.
    let loss = per_row.iter().map(|v| v.max(0.0)).sum::<f64>() / batch as f64;
    let grad = (log_s.mapv(f64::exp) - p_t) / batch as f64;
    Ok((loss, grad))
}
