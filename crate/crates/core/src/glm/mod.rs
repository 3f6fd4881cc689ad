//! Generalized linear conditional densities: fitting, prediction and sampling.
//!
//! Every conditional model in the pipeline is one of these families. Continuous
//! families share an identity-link gaussian core and differ only in how draws are
//! mapped onto the support observed at fit time:
//!
//! * `normal`: plain gaussian draw.
//! * `bounded-normal`: gaussian draw clamped to the observed range.
//! * `truncated-normal`: gaussian conditioned on the observed range.
//! * `zero-inflated-normal`: logistic gate for exact zeros, bounded gaussian otherwise.
//!
//! Discrete families use the logit (binomial) or softmax (categorical) link and
//! are fit by Newton/IRLS on the penalized log-likelihood.

mod fit;
mod sample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fit::fit_glm;
pub use sample::{standard_normal_cdf, standard_normal_quantile, truncated_standard_normal};

/// Smallest residual variance reported for continuous families.
pub const DISPERSION_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("feature length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("response length {response} does not match {rows} design rows")]
    RowMismatch { rows: usize, response: usize },
    #[error("need at least {required} rows with positive weight, got {available}")]
    InsufficientRows { required: usize, available: usize },
    #[error("non-finite value in design or response at row {row}")]
    NonFinite { row: usize },
    #[error("response {value} at row {row} is outside the support of the {family} family")]
    OutOfSupport {
        family: &'static str,
        row: usize,
        value: f64,
    },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("no convergence after {iterations} iterations (last coefficient change {change:.3e})")]
    NonConvergence { iterations: usize, change: f64 },
    #[error("truncated region [{lo}, {hi}] has negligible mass {mass:.3e} around mean {mean}")]
    NegligibleMass { lo: f64, hi: f64, mean: f64, mass: f64 },
    #[error("{0} models do not produce a scalar mean")]
    NotScalar(&'static str),
    #[error("fit_bounds are required for the {0} family")]
    MissingBounds(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Normal,
    BoundedNormal,
    TruncatedNormal,
    ZeroInflatedNormal,
    Binomial,
    Categorical { n_categories: usize },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::BoundedNormal => "bounded-normal",
            Family::TruncatedNormal => "truncated-normal",
            Family::ZeroInflatedNormal => "zero-inflated-normal",
            Family::Binomial => "binomial",
            Family::Categorical { .. } => "categorical",
        }
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, Family::Binomial | Family::Categorical { .. })
    }

    pub fn link(&self) -> &'static str {
        match self {
            Family::Binomial => "logit",
            Family::Categorical { .. } => "softmax",
            _ => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub convergence_tolerance: f64,
    pub ridge_penalty: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            convergence_tolerance: 1e-8,
            ridge_penalty: 1e-8,
        }
    }
}

/// Dense row-major design matrix without the intercept column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Design {
    ncols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(ncols: usize, rows: usize) -> Self {
        Self {
            ncols,
            data: Vec::with_capacity(ncols * rows),
        }
    }

    pub fn from_rows(ncols: usize, rows: &[Vec<f64>]) -> Result<Self, GlmError> {
        let mut design = Self::with_capacity(ncols, rows.len());
        for row in rows {
            design.push_row(row)?;
        }
        Ok(design)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), GlmError> {
        if row.len() != self.ncols {
            return Err(GlmError::LengthMismatch {
                expected: self.ncols,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        if self.ncols == 0 {
            0
        } else {
            self.data.len() / self.ncols
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }
}

/// A fitted conditional density. Coefficient vectors start with the intercept,
/// so their length is one more than the feature length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGlm {
    pub family: Family,
    /// Gaussian part for continuous families, logit coefficients for binomial.
    /// Empty for categorical models.
    pub coefficients: Vec<f64>,
    /// Residual variance of the gaussian part; zero for discrete families.
    pub dispersion: f64,
    /// Logit coefficients of P(response == 0) for the zero-inflated family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_part: Option<Vec<f64>>,
    /// Softmax coefficients for categories 1..K (category 0 is the reference).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_coefficients: Option<Vec<Vec<f64>>>,
    /// Observed response range at fit time (non-zero responses for zero-inflated).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_bounds: Option<[f64; 2]>,
    /// Inverse-information standard errors of `coefficients` (binomial fits).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<f64>>,
    #[serde(default)]
    pub n_obs: f64,
    #[serde(default)]
    pub iterations: usize,
}

/// Output of [`FittedGlm::predict`].
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Mean(f64),
    Probabilities(Vec<f64>),
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn linear_predictor(coefficients: &[f64], x: &[f64]) -> f64 {
    coefficients[0] + coefficients[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Softmax with category 0 as the zero-logit reference, written into `out`.
pub(crate) fn softmax_into(blocks: &[Vec<f64>], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(0.0);
    for block in blocks {
        out.push(linear_predictor(block, x));
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

impl FittedGlm {
    pub fn normal(coefficients: Vec<f64>, dispersion: f64) -> Self {
        Self::continuous(Family::Normal, coefficients, dispersion, None)
    }

    pub fn continuous(family: Family, coefficients: Vec<f64>, dispersion: f64, fit_bounds: Option<[f64; 2]>) -> Self {
        Self {
            family,
            coefficients,
            dispersion,
            zero_part: None,
            category_coefficients: None,
            fit_bounds,
            standard_errors: None,
            n_obs: 0.0,
            iterations: 0,
        }
    }

    pub fn zero_inflated(
        zero_part: Vec<f64>,
        coefficients: Vec<f64>,
        dispersion: f64,
        fit_bounds: Option<[f64; 2]>,
    ) -> Self {
        Self {
            zero_part: Some(zero_part),
            ..Self::continuous(Family::ZeroInflatedNormal, coefficients, dispersion, fit_bounds)
        }
    }

    pub fn binomial(coefficients: Vec<f64>) -> Self {
        Self::continuous(Family::Binomial, coefficients, 0.0, None)
    }

    /// `blocks[k]` holds the coefficients of category `k + 1`.
    pub fn categorical(blocks: Vec<Vec<f64>>) -> Self {
        Self {
            family: Family::Categorical {
                n_categories: blocks.len() + 1,
            },
            coefficients: Vec::new(),
            dispersion: 0.0,
            zero_part: None,
            category_coefficients: Some(blocks),
            fit_bounds: None,
            standard_errors: None,
            n_obs: 0.0,
            iterations: 0,
        }
    }

    /// Number of features (excluding the intercept) this model expects.
    pub fn n_features(&self) -> usize {
        match &self.category_coefficients {
            Some(blocks) => blocks.first().map_or(0, |b| b.len().saturating_sub(1)),
            None => self.coefficients.len().saturating_sub(1),
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<(), GlmError> {
        let expected = self.n_features();
        if x.len() != expected {
            return Err(GlmError::LengthMismatch {
                expected,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Probability of an exact zero (zero-inflated family only).
    pub fn zero_probability(&self, x: &[f64]) -> Result<f64, GlmError> {
        self.check_len(x)?;
        Ok(self
            .zero_part
            .as_ref()
            .map_or(0.0, |z| logistic(linear_predictor(z, x))))
    }

    /// Linear predictor of the gaussian (or logit) part.
    pub fn eta(&self, x: &[f64]) -> Result<f64, GlmError> {
        self.check_len(x)?;
        if matches!(self.family, Family::Categorical { .. }) {
            return Err(GlmError::NotScalar("categorical"));
        }
        Ok(linear_predictor(&self.coefficients, x))
    }

    /// Inverse link applied to the linear predictor. For the zero-inflated family
    /// this is the mixture mean `(1 - P(zero)) * mu`.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64, GlmError> {
        let eta = self.eta(x)?;
        Ok(match self.family {
            Family::Binomial => logistic(eta),
            Family::ZeroInflatedNormal => (1.0 - self.zero_probability(x)?) * eta,
            _ => eta,
        })
    }

    pub fn predict_probabilities(&self, x: &[f64]) -> Result<Vec<f64>, GlmError> {
        self.check_len(x)?;
        match (&self.family, &self.category_coefficients) {
            (Family::Categorical { .. }, Some(blocks)) => {
                let mut out = Vec::with_capacity(blocks.len() + 1);
                softmax_into(blocks, x, &mut out);
                Ok(out)
            }
            (Family::Binomial, _) => {
                let p = logistic(linear_predictor(&self.coefficients, x));
                Ok(vec![1.0 - p, p])
            }
            (family, _) => Err(GlmError::NotScalar(family.name())),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, GlmError> {
        match self.family {
            Family::Categorical { .. } => self.predict_probabilities(x).map(Prediction::Probabilities),
            _ => self.predict_mean(x).map(Prediction::Mean),
        }
    }
}
