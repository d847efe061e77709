use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Mean negative log-softmax at the label indices of `logits [B, C]`.
///
/// Returns the loss and its gradient `(softmax − one_hot) / B`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), TensorError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::dim(format!("cross_entropy: logits {s:?} for {} labels", labels.len())));
    }
    let (b, c) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::Input(format!("label {bad} out of range for {c} classes")));
    }
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut grad = vec![T::ZERO; b * c];
    let mut total = T::ZERO;
    for (r, (row, g)) in logits.data().chunks(c).zip(grad.chunks_mut(c)).enumerate() {
        let max = row.iter().copied().fold(row[0], T::max);
        let mut z = T::ZERO;
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        total += log_z - row[labels[r]];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() * inv_b;
        }
        g[labels[r]] -= inv_b;
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, Tensor::from_raw(s.to_vec(), grad).checked("cross_entropy")?))
}
