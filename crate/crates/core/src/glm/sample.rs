use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::{erfc, erfc_inv};

use super::{linear_predictor, logistic, softmax_into, Family, FittedGlm, GlmError};

/// Regions with less standard-normal mass than this cannot be sampled.
pub const MIN_TRUNCATED_MASS: f64 = 1e-12;

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn standard_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Draw from a standard normal restricted to `[a, b]`.
///
/// Uses plain rejection when the region holds most of the mass and inverse-CDF
/// otherwise. Regions on the positive side are reflected so the CDF is always
/// evaluated in the accurate lower tail.
pub fn truncated_standard_normal<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Option<f64> {
    if a > 0.0 {
        return truncated_standard_normal(-b, -a, rng).map(|z| -z);
    }
    let pa = standard_normal_cdf(a);
    let pb = standard_normal_cdf(b);
    let mass = pb - pa;
    if !(mass >= MIN_TRUNCATED_MASS) {
        return None;
    }
    if mass > 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a && z <= b {
                return Some(z);
            }
        }
    }
    let u: f64 = rng.random();
    let z = standard_normal_quantile(pa + u * mass);
    Some(z.clamp(a, b))
}

impl FittedGlm {
    fn bounds(&self) -> Result<[f64; 2], GlmError> {
        self.fit_bounds.ok_or(GlmError::MissingBounds(self.family.name()))
    }

    fn gaussian_draw<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        mean + self.dispersion.max(0.0).sqrt() * z
    }

    fn truncated_draw<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> Result<f64, GlmError> {
        let [lo, hi] = self.bounds()?;
        let sd = self.dispersion.max(0.0).sqrt();
        let negligible = |mass| GlmError::NegligibleMass { lo, hi, mean, mass };
        if sd == 0.0 {
            return if (lo..=hi).contains(&mean) {
                Ok(mean)
            } else {
                Err(negligible(0.0))
            };
        }
        let a = (lo - mean) / sd;
        let b = (hi - mean) / sd;
        match truncated_standard_normal(a, b, rng) {
            Some(z) => Ok((mean + sd * z).clamp(lo, hi)),
            None => {
                let mass = if a > 0.0 {
                    standard_normal_cdf(-a) - standard_normal_cdf(-b)
                } else {
                    standard_normal_cdf(b) - standard_normal_cdf(a)
                };
                Err(negligible(mass))
            }
        }
    }

    /// Draw one value from the conditional density at features `x`.
    /// Categorical draws return the category index; binomial draws return 0 or 1.
    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<f64, GlmError> {
        let mut scratch = Vec::new();
        self.sample_with(x, rng, &mut scratch)
    }

    /// Like [`FittedGlm::sample`] but reuses `scratch` for categorical probabilities.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        rng: &mut R,
        scratch: &mut Vec<f64>,
    ) -> Result<f64, GlmError> {
        match self.family {
            Family::Categorical { .. } => {
                if x.len() != self.n_features() {
                    return Err(GlmError::LengthMismatch {
                        expected: self.n_features(),
                        actual: x.len(),
                    });
                }
                let blocks = self.category_coefficients.as_deref().unwrap_or(&[]);
                softmax_into(blocks, x, scratch);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in scratch.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Ok(k as f64);
                    }
                }
                Ok((scratch.len() - 1) as f64)
            }
            Family::Binomial => {
                let p = logistic(self.eta(x)?);
                let u: f64 = rng.random();
                Ok(f64::from(u8::from(u < p)))
            }
            Family::Normal => {
                let mean = self.eta(x)?;
                Ok(self.gaussian_draw(mean, rng))
            }
            Family::BoundedNormal => {
                let mean = self.eta(x)?;
                let [lo, hi] = self.bounds()?;
                Ok(self.gaussian_draw(mean, rng).clamp(lo, hi))
            }
            Family::TruncatedNormal => {
                let mean = self.eta(x)?;
                self.truncated_draw(mean, rng)
            }
            Family::ZeroInflatedNormal => {
                let mean = self.eta(x)?;
                let p_zero = self
                    .zero_part
                    .as_ref()
                    .map_or(0.0, |z| logistic(linear_predictor(z, x)));
                let u: f64 = rng.random();
                if u < p_zero {
                    return Ok(0.0);
                }
                let draw = self.gaussian_draw(mean, rng);
                Ok(match self.fit_bounds {
                    Some([lo, hi]) => draw.clamp(lo, hi),
                    None => draw,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn degenerate_normal_returns_mean() {
        let m = FittedGlm::normal(vec![1.5, 2.0], 0.0);
        let mut rng = substream(1, "t", 0);
        for _ in 0..10 {
            assert_eq!(m.sample(&[0.25], &mut rng).unwrap(), 2.0);
        }
    }

    #[test]
    fn bounded_normal_draws_stay_in_range() {
        let m = FittedGlm::continuous(Family::BoundedNormal, vec![95.0], 400.0, Some([0.0, 100.0]));
        let mut rng = substream(2, "t", 0);
        for _ in 0..10_000 {
            let v = m.sample(&[], &mut rng).unwrap();
            assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn zero_inflated_with_certain_zero() {
        let m = FittedGlm::zero_inflated(vec![1e3], vec![5.0], 1.0, Some([1.0, 9.0]));
        let mut rng = substream(3, "t", 0);
        for _ in 0..1_000 {
            assert_eq!(m.sample(&[], &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn negligible_truncated_mass_is_an_error() {
        let m = FittedGlm::continuous(Family::TruncatedNormal, vec![0.0], 1.0, Some([40.0, 41.0]));
        let mut rng = substream(4, "t", 0);
        assert!(matches!(m.sample(&[], &mut rng), Err(GlmError::NegligibleMass { .. })));
    }

    #[test]
    fn truncated_draws_pass_goodness_of_fit() {
        // mean 0, sd 2, truncated to [1, 6]: mostly an upper-tail region
        let (mean, sd, lo, hi) = (0.0, 2.0, 1.0, 6.0);
        let m = FittedGlm::continuous(Family::TruncatedNormal, vec![mean], sd * sd, Some([lo, hi]));
        let mut rng = substream(5, "t", 0);
        let bins = 20;
        let draws = 100_000;
        let a = standard_normal_cdf((lo - mean) / sd);
        let b = standard_normal_cdf((hi - mean) / sd);
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let v = m.sample(&[], &mut rng).unwrap();
            assert!((lo..=hi).contains(&v));
            let u = (standard_normal_cdf((v - mean) / sd) - a) / (b - a);
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    #[test]
    fn normal_draws_reproduce_mean_and_dispersion() {
        let m = FittedGlm::normal(vec![2.0, -1.0], 2.25);
        let mut rng = substream(6, "t", 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| m.sample(&[0.5], &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (2.25f64 / n as f64).sqrt();
        assert!((mean - 1.5).abs() < 4.0 * se);
        assert!((var / 2.25 - 1.0).abs() < 0.05);
    }

    #[test]
    fn categorical_draw_frequencies() {
        let m = FittedGlm::categorical(vec![vec![0.0], vec![(2.0f64).ln()]]);
        let mut rng = substream(7, "t", 0);
        let mut counts = [0usize; 3];
        for _ in 0..40_000 {
            counts[m.sample(&[], &mut rng).unwrap() as usize] += 1;
        }
        // probabilities 1/4, 1/4, 1/2
        assert!((counts[2] as f64 / 40_000.0 - 0.5).abs() < 0.01);
        assert!((counts[0] as f64 / 40_000.0 - 0.25).abs() < 0.01);
    }
}
