use ndarray::{Array2, ArrayView2, Axis};

use super::NnError;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), NnError> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(NnError::shape(
            "softmax_cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::Label { label, classes: c });
    }
    let mut loss = 0.0;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    let mut grad = softmax_rows(logits);
    for (mut row, &label) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        row[label] -= 1.0;
    }
    grad /= b as f64;
    Ok((loss / b as f64, grad))
}
