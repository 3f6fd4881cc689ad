//! Positivity, calibration and projection diagnostics. Every pass is
//! read-only over a cohort and a strategy.

mod calibration;
mod pca;
mod positivity;
mod weights;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{smd, smd_over_time, CalibrationReport, Endpoint, EndpointSummary, SmdRow, POOLED_SD_CONVENTION};
pub use pca::{leading_components, pca_agreement, Agreement, PcaAgreementExport, PcaPanel, PcaPoint};
pub use positivity::{
    is_weights, positivity_report, Coverage, EpochPositivity, HistoryMatching, PositivityOptions, PositivityReport,
    WeightRecord, NEAR_VIOLATION,
};
pub use weights::{ess_ratio, EssSummary};

use crate::glm::GlmError;
use crate::models::ModelError;
use crate::strategy::StrategyError;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("treatment model: {0}")]
    Glm(#[from] GlmError),
    #[error("importance weights: {0}")]
    Weights(String),
    #[error("simulated trajectories carry no covariate paths; simulate with retained paths")]
    MissingPaths,
    #[error("simulated state has {actual} covariates, schema has {expected}")]
    Width { expected: usize, actual: usize },
    #[error("pca: {0}")]
    Pca(String),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Long-format record for plotting: one metric value at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub epoch: u32,
    pub metric: String,
    /// Empty when undefined.
    pub value: Option<f64>,
    pub split: String,
}

impl TidyRow {
    pub(crate) fn new(epoch: u32, metric: &str, value: f64, split: &str) -> Self {
        Self::maybe(epoch, metric, Some(value), split)
    }

    pub(crate) fn maybe(epoch: u32, metric: &str, value: Option<f64>, split: &str) -> Self {
        Self {
            epoch,
            metric: metric.to_string(),
            value,
            split: split.to_string(),
        }
    }
}

/// Write tidy rows as CSV, after an optional `#` comment line.
pub fn write_tidy<W: Write>(rows: &[TidyRow], mut out: W, comment: Option<&str>) -> Result<(), DiagnosticsError> {
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(csv::Error::from)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "metric", "value", "split"])?;
    for r in rows {
        let value = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.epoch.to_string().as_str(), &r.metric, &value, &r.split])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
