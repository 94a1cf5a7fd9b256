use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits (already divided by the batch size).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = logits.batch();
    if labels.len() != batch || batch == 0 {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let k = logits.sample_len();
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut loss = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidParameter(format!("label {y} for {k} classes")));
        }
        let logp = log_softmax_row(logits.sample(n));
        loss -= logp[y];
        let g = grad.sample_mut(n);
        for c in 0..k {
            g[c] = (logp[c].exp() - if c == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|n| {
            let row = logits.sample(n);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
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
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.1, -0.3]).unwrap();
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..6 {
            let mut up = logits.clone();
            up.data_mut()[i] += eps;
            let mut dn = logits.clone();
            dn.data_mut()[i] -= eps;
            let fd = (cross_entropy(&up, &labels).unwrap().0 - cross_entropy(&dn, &labels).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_row(&[1000.0, 0.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
