use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln(probs[label])`, with the probability clamped to [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::domain(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Cross-entropy of `softmax(logits)` and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let mut probs = softmax(logits);
    let loss = cross_entropy(&probs, label)?;
    probs[label] -= 1.0;
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certain_prediction_has_zero_loss() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn half_probability_is_ln2() {
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn uniform_over_ten_is_ln10() {
        let probs = vec![0.1; 10];
        assert!((cross_entropy(&probs, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let loss = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
