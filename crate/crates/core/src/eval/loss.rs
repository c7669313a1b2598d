//! Class weighting and weighted softmax cross-entropy.

use crate::error::{dim_err, CimError, Result};
use crate::tensor::Tensor;

/// Inverse-frequency class weights `N / (K · N_c)`, rescaled to mean 1.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if num_classes < 2 {
        return Err(CimError::Config(format!(
            "class weights need at least 2 classes, got {num_classes}"
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return dim_err(format!("label {l} out of range for {num_classes} classes"));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(CimError::Empty(format!("class {c} has no samples")));
    }
    let total = labels.len() as f64;
    let k = num_classes as f64;
    let raw: Vec<f64> = counts.iter().map(|&n| total / (k * n as f64)).collect();
    let mean = raw.iter().sum::<f64>() / k;
    Ok(Tensor::new(&[num_classes], raw.iter().map(|w| w / mean).collect())?)
}

/// Softmax cross-entropy where each sample's loss is multiplied by the weight
/// of its true class; the result is the plain mean over the batch.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    weights: &Tensor,
) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} logit rows", labels.len()));
    }
    if weights.shape() != [k] {
        return dim_err(format!("weights {:?} for {k} classes", weights.shape()));
    }
    logits.ensure_finite("logits")?;
    let (x, w) = (logits.data(), weights.data());
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return dim_err(format!("label {y} out of range for {k} classes"));
        }
        let row = &x[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += w[y] * (lse - row[y]);
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[i * k + j] = w[y] * (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_weights_are_one() {
        let w = class_weights(&[0, 1, 0, 1], 2).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn imbalanced_weights_normalize_to_mean_one() {
        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let w = class_weights(&labels, 2).unwrap();
        // raw (100/180, 100/20) = (0.5556, 5.0), mean 2.7778
        assert!((w.data()[0] - 0.2).abs() < 1e-12);
        assert!((w.data()[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(class_weights(&[0, 0, 0], 2).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k_times_weight() {
        let logits = Tensor::zeros(&[2, 4]);
        let w = Tensor::new(&[4], vec![0.5, 1.0, 1.5, 1.0]).unwrap();
        let (loss, _) = weighted_cross_entropy(&logits, &[0, 2], &w).unwrap();
        assert!((loss - (0.5 + 1.5) / 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let logits = Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        let (loss, _) = weighted_cross_entropy(&logits, &[1], &Tensor::full(&[3], 1.0)).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let logits = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(weighted_cross_entropy(&logits, &[0], &Tensor::full(&[2], 1.0)).is_err());
    }
}
