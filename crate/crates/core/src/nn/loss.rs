use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / n`. Logits are `(n, classes, 1, 1)`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f32, Tensor4)> {
    let n = logits.n();
    let classes = logits.item_len();
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::dim(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = vec![0.0f32; n * classes];
    let mut total = 0.0f64;
    for (i, (row, g)) in logits.data().chunks(classes).zip(grad.chunks_mut(classes)).enumerate() {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]] as f64;
        for (c, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v as f64 - lse).exp();
            let target = if c == labels[i] { 1.0 } else { 0.0 };
            *gv = ((p - target) / n as f64) as f32;
        }
    }
    Ok(((total / n as f64) as f32, Tensor4::new(logits.dims(), grad)?))
}

/// Index of the largest logit in each row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    logits
        .data()
        .chunks(logits.item_len())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor4::new([2, 10, 1, 1], vec![0.3; 20]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 7]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
        assert!((grad.data()[0] - (0.1 - 1.0) / 2.0).abs() < 1e-7);
        assert!((grad.data()[1] - 0.1 / 2.0).abs() < 1e-7);
    }

    #[test]
    fn saturated_correct_prediction() {
        let mut row = vec![-50.0f32; 10];
        row[3] = 50.0;
        let logits = Tensor4::new([1, 10, 1, 1], row).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor4::zeros([1, 3, 1, 1]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
