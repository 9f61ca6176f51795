use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `(N, K)` logits, stabilised by subtracting the row max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [n, k] = *logits.shape() else {
        return Err(Error::InvalidArgument(format!(
            "logits must be (N, K), got {:?}",
            logits.shape()
        )));
    };
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        out.extend(exp.into_iter().map(|e| e / z));
    }
    Tensor::from_vec(&[n, k], out)
}

/// Mean cross-entropy over the batch, using log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [n, k] = *logits.shape() else {
        return Err(Error::InvalidArgument(format!(
            "logits must be (N, K), got {:?}",
            logits.shape()
        )));
    };
    check_labels(n, k, labels)?;
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / n as f64)
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(p - onehot) / N`.
pub fn softmax_cross_entropy_backward(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut p = softmax(logits)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels(n, k, labels)?;
    let d = p.data_mut();
    for (r, &y) in labels.iter().enumerate() {
        d[r * k + y] -= 1.0;
    }
    for v in d.iter_mut() {
        *v /= n as f64;
    }
    Ok(p)
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::full(&[3, 7], 0.3).unwrap();
        let l = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn large_logits_are_stable() {
        let logits = Tensor::from_vec(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let l = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let logits = Tensor::gaussian(&[4, 5], 0.0, 2.0, &mut rng).unwrap();
        let labels = [1, 0, 4, 2];
        let g = softmax_cross_entropy_backward(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap()
                - softmax_cross_entropy(&m, &labels).unwrap())
                / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn probabilities_and_loss_are_well_formed(v in proptest::collection::vec(-30.0f64..30.0, 6), y in 0usize..3) {
            let logits = Tensor::from_vec(&[2, 3], v).unwrap();
            let p = softmax(&logits).unwrap();
            for row in p.data().chunks_exact(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            prop_assert!(softmax_cross_entropy(&logits, &[y, 2 - y]).unwrap() >= 0.0);
        }
    }
}
