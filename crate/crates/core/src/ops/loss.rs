use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(2, "softmax_xent logits")?;
    let (n, classes) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::Input(format!(
            "softmax_xent: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::Input(format!(
            "softmax_xent: label {bad} outside [0, {classes})"
        )));
    }
    logits.check_finite("softmax_xent logits")?;

    let inv_n = T::one() / T::from_f64(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(n * classes);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &e| a + e);
        let label = usize::from(label);
        total = total - ((row[label] - max) - sum.ln());
        for (k, e) in exps.into_iter().enumerate() {
            let p = e / sum;
            let target = if k == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::new(vec![n, classes], grad)?))
}
