//! Softmax cross-entropy, stabilized by max subtraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch plus the logit gradient
/// `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dimension(
            "softmax_cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    for &l in labels {
        if l >= k {
            return Err(Error::Label { label: l, classes: k });
        }
    }
    let mut dlogits = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0f64;
    for row in 0..n {
        let ls = &logits.data()[row * k..(row + 1) * k];
        let mut mx = ls[0];
        for &v in &ls[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = 0.0f32;
        let ds = &mut dlogits.data_mut()[row * k..(row + 1) * k];
        for (d, &v) in ds.iter_mut().zip(ls.iter()) {
            let e = (v - mx).exp();
            *d = e;
            denom += e;
        }
        let label = labels[row];
        loss += -(((ls[label] - mx) as f64) - (denom as f64).ln());
        let inv = 1.0 / denom;
        for d in ds.iter_mut() {
            *d *= inv;
        }
        ds[label] -= 1.0;
        for d in ds.iter_mut() {
            *d /= n as f32;
        }
    }
    let loss = (loss / n as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            location: "softmax_cross_entropy".into(),
        });
    }
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_two_class_is_ln2() {
        let logits = t(&[1, 2], &[0.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn huge_margin_drives_loss_to_zero() {
        let logits = t(&[1, 2], &[50.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-20, "loss was {loss}");
    }

    #[test]
    fn dlogits_rows_sum_to_zero() {
        let logits = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.1, -0.1]);
        let (_, d) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for row in 0..2 {
            let s: f32 = d.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_label_is_error() {
        let logits = t(&[1, 3], &[0.0, 0.0, 0.0]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }
}
