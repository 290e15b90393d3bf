//! Classification losses with closed-form gradients. Both are mean-reduced
//! over the batch.

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("flag {flag} at row {row} is not 0 or 1")]
    BadFlag { row: usize, flag: f64 },
    #[error("batch size mismatch: {logits} logit rows vs {labels} labels")]
    BatchMismatch { logits: usize, labels: usize },
}

/// Softmax cross-entropy. Returns (mean loss, grad wrt logits).
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), LossError> {
    let c = logits.last_dim();
    let n = logits.rows_for(c);
    if n != labels.len() {
        return Err(LossError::BatchMismatch { logits: n, labels: labels.len() });
    }
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    for r in 0..n {
        let label = labels[r];
        if label >= c {
            return Err(LossError::LabelOutOfRange { row: r, label, classes: c });
        }
        let row = &logits.data[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let log_z = mx + sum_exp.ln();
        loss += log_z - row[label];
        for j in 0..c {
            let p = (row[j] - log_z).exp();
            grad.data[r * c + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Sigmoid binary cross-entropy on raw logits. Returns (mean loss, grad wrt
/// logits).
pub fn bce_loss(logits: &[f64], flags: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    if logits.len() != flags.len() {
        return Err(LossError::BatchMismatch { logits: logits.len(), labels: flags.len() });
    }
    let n = logits.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let z = flags[i];
        if z != 0.0 && z != 1.0 {
            return Err(LossError::BadFlag { row: i, flag: z });
        }
        let x = logits[i];
        // max(x,0) - x*z + ln(1 + e^{-|x|})
        loss += x.max(0.0) - x * z + (-x.abs()).exp().ln_1p();
        let s = super::ops::sigmoid(x);
        grad[i] = (s - z) / n as f64;
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_four_classes_is_ln4() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, _) = cross_entropy_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_logit_flag_one_is_ln2() {
        let (loss, grad) = bce_loss(&[0.0], &[1.0]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        assert!((grad[0] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let logits = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            cross_entropy_loss(&logits, &[4]),
            Err(LossError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut logits = Tensor::from_vec(&[2, 4], vec![0.3, -1.2, 0.7, 0.1, 2.0, -0.5, 0.0, 1.1]);
        let labels = [2usize, 0];
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let orig = logits.data[i];
            logits.data[i] = orig + h;
            let (lp, _) = cross_entropy_loss(&logits, &labels).unwrap();
            logits.data[i] = orig - h;
            let (lm, _) = cross_entropy_loss(&logits, &labels).unwrap();
            logits.data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "entry {i}: fd {fd}, analytic {}", grad.data[i]);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let logits = vec![0.4, -2.0, 1.5];
        let flags = vec![1.0, 0.0, 1.0];
        let (_, grad) = bce_loss(&logits, &flags).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let fd = (bce_loss(&lp, &flags).unwrap().0 - bce_loss(&lm, &flags).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-6);
        }
    }
}
