use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    let n = labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &label) in logits.data().chunks(classes).zip(grad.chunks_mut(classes)).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss -= row[label] - max - log_sum;
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp() / sum / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}
