//! Classification and Gaussian-policy loss math.

use crate::error::{ElaError, Result};

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss with softmax, plus the gradient w.r.t. the logits.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(ElaError::Argument("need at least 2 classes".into()));
    }
    if label >= logits.len() {
        return Err(ElaError::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let probs = softmax(logits);
    let loss = -probs[label].max(1e-300).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Log-density and entropy of a diagonal Gaussian at `sample`.
///
/// Entropy is `sum(log_std_i + 0.5*ln(2*pi*e))`, independent of the mean.
pub fn gaussian_logprob_entropy(mean: &[f64], log_std: &[f64], sample: &[f64]) -> Result<(f64, f64)> {
    if mean.len() != log_std.len() || mean.len() != sample.len() {
        return Err(ElaError::Shape(format!(
            "gaussian dims mean={} log_std={} sample={}",
            mean.len(),
            log_std.len(),
            sample.len()
        )));
    }
    let mut logprob = 0.0;
    let mut entropy = 0.0;
    for i in 0..mean.len() {
        let std = log_std[i].exp();
        let z = (sample[i] - mean[i]) / std;
        logprob += -0.5 * z * z - log_std[i] - 0.5 * LN_2PI;
        entropy += log_std[i] + 0.5 * (LN_2PI + 1.0);
    }
    Ok((logprob, entropy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let (loss, grad) = softmax_xent(&[1.0; 4], 2).unwrap();
        assert_relative_eq!(loss, 4.0_f64.ln(), epsilon = 1e-12);
        let gsum: f64 = grad.iter().sum();
        assert!(gsum.abs() < 1e-9);
    }

    #[test]
    fn saturated_logits_near_zero_loss() {
        let (loss, _) = softmax_xent(&[10.0, -10.0], 0).unwrap();
        assert!(loss < 1e-8 && loss >= 0.0, "loss={loss}");
        assert_relative_eq!(loss, 2.061e-9, max_relative = 0.01);
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        // seed-7 style fixed logits
        let logits = [0.31, -1.2, 2.05, 0.7, -0.44];
        let label = 3;
        let (_, grad) = softmax_xent(&logits, label).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits;
            let mut lm = logits;
            lp[i] += h;
            lm[i] -= h;
            let fp = softmax_xent(&lp, label).unwrap().0;
            let fm = softmax_xent(&lm, label).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, max_relative = 1e-4, epsilon = 1e-8);
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(softmax_xent(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn softmax_is_simplex_point() {
        let p = softmax(&[3.0, -1.0, 0.5, 100.0]);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn standard_normal_at_mode() {
        let (lp, ent) = gaussian_logprob_entropy(&[0.0], &[0.0], &[0.0]).unwrap();
        assert_relative_eq!(lp, -0.9189385332046727, epsilon = 1e-12);
        assert_relative_eq!(ent, 1.4189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn three_dim_sum_of_terms() {
        let (lp, _) = gaussian_logprob_entropy(&[0.0; 3], &[0.0; 3], &[1.0; 3]).unwrap();
        assert_relative_eq!(lp, 3.0 * -0.9189385332046727 - 1.5, epsilon = 1e-12);
    }

    #[test]
    fn entropy_independent_of_mean() {
        let (_, e1) = gaussian_logprob_entropy(&[0.0, 5.0], &[0.3, -0.2], &[0.0, 0.0]).unwrap();
        let (_, e2) = gaussian_logprob_entropy(&[-7.0, 1.0], &[0.3, -0.2], &[2.0, 2.0]).unwrap();
        assert_eq!(e1, e2);
    }
}
