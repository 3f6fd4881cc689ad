use serde::{Deserialize, Serialize};

use super::DiagnosticsError;

/// Concentration summary of one epoch's importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub n: usize,
    /// Coefficient of variation: population sd over mean.
    pub cv: f64,
    /// Population variance over squared mean (the square of `cv`).
    pub weight_variance_ratio: f64,
    /// (Σw)² / Σw².
    pub ess: f64,
    /// n / (1 + cv²), which equals `ess` up to rounding.
    pub ess_identity: f64,
    /// ess / n.
    pub ratio: f64,
}

/// Effective sample size of `weights`, by the direct formula and through the
/// coefficient of variation.
pub fn ess_ratio(weights: &[f64]) -> Result<EssSummary, DiagnosticsError> {
    if weights.is_empty() {
        return Err(DiagnosticsError::Weights("no weights".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(DiagnosticsError::Weights(format!(
            "weight {w} is not a finite non-negative number"
        )));
    }
    let n = weights.len() as f64;
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(DiagnosticsError::Weights("all weights are zero".into()));
    }
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let mean = sum / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    let ratio_sq = var / (mean * mean);
    let ess = sum * sum / sum_sq;
    Ok(EssSummary {
        n: weights.len(),
        cv: ratio_sq.sqrt(),
        weight_variance_ratio: ratio_sq,
        ess,
        ess_identity: n / (1.0 + ratio_sq),
        ratio: ess / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights() {
        let s = ess_ratio(&[2.0; 7]).unwrap();
        assert_eq!(s.cv, 0.0);
        assert_eq!(s.ess, 7.0);
        assert_eq!(s.ratio, 1.0);
    }

    #[test]
    fn single_atom() {
        let mut w = vec![0.0; 9];
        w[0] = 4.2;
        assert_eq!(ess_ratio(&w).unwrap().ess, 1.0);
    }

    #[test]
    fn one_two_three() {
        let s = ess_ratio(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.ess, 36.0 / 14.0);
        assert!((s.ratio - 36.0 / 42.0).abs() < 1e-15);
        // population variance 2/3 over mean² 4
        assert!((s.weight_variance_ratio - 1.0 / 6.0).abs() < 1e-15);
        assert!((s.ess_identity - s.ess).abs() <= 1e-12 * s.ess);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(ess_ratio(&[]).is_err());
        assert!(ess_ratio(&[0.0, 0.0]).is_err());
        assert!(ess_ratio(&[1.0, -1.0]).is_err());
        assert!(ess_ratio(&[1.0, f64::INFINITY]).is_err());
    }
}
