//! Small descriptive-statistics helpers shared by reports.

use serde::{Deserialize, Serialize};

/// Days represented by one epoch of the 12-hour decision grid.
pub const EPOCH_DAYS: f64 = 0.5;

/// Linear-interpolation quantile (the "type 7" rule) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance; NaN for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

/// Length-of-stay summary in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
}

impl LosStats {
    /// Summarize stop epochs, converting them to days.
    pub fn from_epochs(epochs: impl IntoIterator<Item = u32>) -> Self {
        let days: Vec<f64> = epochs.into_iter().map(|e| f64::from(e) * EPOCH_DAYS).collect();
        let s = sorted(&days);
        Self {
            median: quantile_sorted(&s, 0.5),
            q1: quantile_sorted(&s, 0.25),
            q3: quantile_sorted(&s, 0.75),
            mean: mean(&days),
        }
    }
}

/// Five-number-plus summary used for distribution-overlap exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
}

impl DistributionSummary {
    pub fn of(values: &[f64]) -> Self {
        let s = sorted(values);
        Self {
            n: values.len(),
            mean: mean(values),
            sd: sample_variance(values).sqrt(),
            min: s.first().copied().unwrap_or(f64::NAN),
            q05: quantile_sorted(&s, 0.05),
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            q95: quantile_sorted(&s, 0.95),
            max: s.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
    }

    #[test]
    fn constant_stay_summary() {
        let los = LosStats::from_epochs(vec![6; 10]);
        assert_eq!(los.median, 3.0);
        assert_eq!(los.mean, 3.0);
        assert_eq!(los.q1, 3.0);
        assert_eq!(los.q3, 3.0);
    }
}
