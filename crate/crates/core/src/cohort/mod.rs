//! Discrete-time longitudinal cohorts on a fixed epoch grid.
//!
//! Each trajectory starts at epoch 0 and runs either to the horizon `T` or to
//! the epoch of the event. Covariates are recorded at epoch `t` only while the
//! subject is alive and was still treated at `t - 1`; the outcome is absorbing
//! and treatment, once stopped, stays stopped.

mod io;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::Family;
use crate::stats::{LosStats, EPOCH_DAYS};

pub use io::{load_cohort, read_cohort, write_cohort, Exclusion, Filters, LoadedCohort};

/// Default follow-up: 180 half-day epochs (90 days).
pub const DEFAULT_HORIZON: u32 = 180;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: column mismatch: {detail}")]
    ColumnMismatch { path: String, detail: String },
    #[error("{path} line {line}: invalid value {value:?} for column {column}")]
    Parse {
        path: String,
        line: u64,
        column: String,
        value: String,
    },
    #[error("subject {subject}: value {value} of {column} is outside declared bounds [{lo}, {hi}]")]
    OutOfBounds {
        subject: String,
        column: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("duplicate (subject, epoch) key ({subject}, {epoch})")]
    DuplicateKey { subject: String, epoch: u32 },
    #[error("subject {subject}: epochs must be contiguous from 0 (found {found} where {expected} was expected)")]
    EpochGap { subject: String, expected: u32, found: u32 },
    #[error("subject {subject}: epoch {epoch} exceeds the horizon {horizon}")]
    BeyondHorizon { subject: String, epoch: u32, horizon: u32 },
    #[error("subject {subject}: outcome not absorbing at epoch {epoch}")]
    OutcomeNotAbsorbing { subject: String, epoch: u32 },
    #[error("subject {subject}: treatment resumed after stop at epoch {epoch}")]
    TreatmentResumed { subject: String, epoch: u32 },
    #[error("subject {subject}: covariates recorded at epoch {epoch} where none are observable")]
    UnexpectedCovariates { subject: String, epoch: u32 },
    #[error("subject {subject}: covariates missing at in-treatment epoch {epoch}")]
    MissingCovariates { subject: String, epoch: u32 },
    #[error("subject {subject}: follow-up ends at epoch {last} without an event before the horizon {horizon}")]
    TruncatedFollowUp { subject: String, last: u32, horizon: u32 },
    #[error("subject {subject}: event at epoch 0")]
    EventAtBaseline { subject: String },
    #[error("subject {subject}: covariate row has {actual} values, schema has {expected}")]
    Width {
        subject: String,
        expected: usize,
        actual: usize,
    },
    #[error("cohort is empty")]
    Empty,
}

/// Distribution family of a time-varying covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    Normal,
    BoundedNormal,
    TruncatedNormal,
    ZeroInflatedNormal,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    LastValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub family: Distribution,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl CovariateSpec {
    pub fn n_categories(&self) -> Option<usize> {
        self.categories.as_ref().map(Vec::len)
    }

    pub fn is_categorical(&self) -> bool {
        self.family == Distribution::Categorical
    }

    pub fn glm_family(&self) -> Family {
        match self.family {
            Distribution::Normal => Family::Normal,
            Distribution::BoundedNormal => Family::BoundedNormal,
            Distribution::TruncatedNormal => Family::TruncatedNormal,
            Distribution::ZeroInflatedNormal => Family::ZeroInflatedNormal,
            Distribution::Categorical => Family::Categorical {
                n_categories: self.n_categories().unwrap_or(0),
            },
        }
    }
}

/// A fixed baseline covariate: real-valued unless `categories` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default = "default_horizon")]
    pub horizon: u32,
    #[serde(default)]
    pub baseline: Vec<BaselineSpec>,
    pub covariates: Vec<CovariateSpec>,
}

fn default_horizon() -> u32 {
    DEFAULT_HORIZON
}

impl Schema {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.horizon < 1 {
            return Err(CohortError::Schema("horizon must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        let names = self
            .baseline
            .iter()
            .map(|b| &b.name)
            .chain(self.covariates.iter().map(|c| &c.name));
        for name in names {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(CohortError::Schema(format!("duplicate or empty name {name:?}")));
            }
            if ["subject_id", "epoch", "treatment", "outcome"].contains(&name.as_str()) {
                return Err(CohortError::Schema(format!("reserved column name {name:?}")));
            }
        }
        for b in &self.baseline {
            if let Some(cats) = &b.categories {
                if cats.len() < 2 {
                    return Err(CohortError::Schema(format!(
                        "baseline {} needs at least two categories",
                        b.name
                    )));
                }
            }
        }
        for c in &self.covariates {
            match c.family {
                Distribution::BoundedNormal | Distribution::TruncatedNormal => match c.bounds {
                    Some([lo, hi]) if lo < hi => {}
                    _ => {
                        return Err(CohortError::Schema(format!(
                            "covariate {} needs bounds lo < hi for its family",
                            c.name
                        )))
                    }
                },
                Distribution::Categorical if c.n_categories().unwrap_or(0) < 2 => {
                    return Err(CohortError::Schema(format!(
                        "categorical covariate {} needs at least two categories",
                        c.name
                    )));
                }
                _ => {}
            }
            if c.family != Distribution::Categorical && c.categories.is_some() {
                return Err(CohortError::Schema(format!(
                    "covariate {} declares categories but is not categorical",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn baseline_index(&self, name: &str) -> Option<usize> {
        self.baseline.iter().position(|b| b.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub subject_id: String,
    /// One entry per baseline column; categorical values hold the category index.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Schema-ordered covariates, `None` when the epoch is not observable
    /// (after stop, at the event, or at the horizon). Categorical values hold
    /// the category index.
    pub covariates: Option<Vec<Option<f64>>>,
    /// true = continue, false = stopped.
    pub treatment: bool,
    /// true once the event has occurred.
    pub outcome: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub baseline: BaselineRecord,
    pub epochs: Vec<EpochRecord>,
}

impl Trajectory {
    pub fn subject_id(&self) -> &str {
        &self.baseline.subject_id
    }

    /// Covariates observed at epoch `t`.
    pub fn observed(&self, t: u32) -> Option<&[Option<f64>]> {
        self.epochs.get(t as usize)?.covariates.as_deref()
    }

    /// Number of epochs with recorded covariates (they are contiguous from 0).
    pub fn observed_len(&self) -> usize {
        self.epochs.iter().take_while(|e| e.covariates.is_some()).count()
    }

    pub fn event_epoch(&self) -> Option<u32> {
        self.epochs.iter().find(|e| e.outcome).map(|e| e.epoch)
    }

    /// First epoch with an observed stop decision.
    pub fn stop_epoch(&self) -> Option<u32> {
        self.epochs
            .iter()
            .find(|e| e.covariates.is_some() && !e.treatment)
            .map(|e| e.epoch)
    }

    pub fn died_in_treatment(&self) -> bool {
        self.event_epoch().is_some() && self.stop_epoch().is_none()
    }

    /// Stop epoch used for length-of-treatment statistics: the stop decision
    /// epoch, `t_d - 1` for an in-treatment event, `T - 1` when never stopped.
    pub fn tau(&self, horizon: u32) -> u32 {
        match (self.stop_epoch(), self.event_epoch()) {
            (Some(s), _) => s,
            (None, Some(d)) => d.saturating_sub(1).min(horizon.saturating_sub(1)),
            (None, None) => horizon.saturating_sub(1),
        }
    }

    /// Check every structural invariant against `schema`.
    pub fn validate(&self, schema: &Schema) -> Result<(), CohortError> {
        let subject = || self.subject_id().to_string();
        let horizon = schema.horizon;
        if self.baseline.values.len() != schema.baseline.len() {
            return Err(CohortError::Width {
                subject: subject(),
                expected: schema.baseline.len(),
                actual: self.baseline.values.len(),
            });
        }
        if self.epochs.is_empty() {
            return Err(CohortError::EpochGap {
                subject: subject(),
                expected: 0,
                found: u32::MAX,
            });
        }
        let mut prev: Option<&EpochRecord> = None;
        for (i, rec) in self.epochs.iter().enumerate() {
            let expected = i as u32;
            if rec.epoch != expected {
                return Err(CohortError::EpochGap {
                    subject: subject(),
                    expected,
                    found: rec.epoch,
                });
            }
            if rec.epoch > horizon {
                return Err(CohortError::BeyondHorizon {
                    subject: subject(),
                    epoch: rec.epoch,
                    horizon,
                });
            }
            if let Some(p) = prev {
                if p.outcome && !rec.outcome {
                    return Err(CohortError::OutcomeNotAbsorbing {
                        subject: subject(),
                        epoch: rec.epoch,
                    });
                }
                if !p.treatment && rec.treatment {
                    return Err(CohortError::TreatmentResumed {
                        subject: subject(),
                        epoch: rec.epoch,
                    });
                }
            } else if rec.outcome {
                return Err(CohortError::EventAtBaseline { subject: subject() });
            }
            let treated_before = prev.is_none_or(|p| p.treatment && !p.outcome);
            let observable = !rec.outcome && treated_before && rec.epoch < horizon;
            match &rec.covariates {
                Some(values) => {
                    if !observable {
                        return Err(CohortError::UnexpectedCovariates {
                            subject: subject(),
                            epoch: rec.epoch,
                        });
                    }
                    if values.len() != schema.covariates.len() {
                        return Err(CohortError::Width {
                            subject: subject(),
                            expected: schema.covariates.len(),
                            actual: values.len(),
                        });
                    }
                }
                None if observable => {
                    return Err(CohortError::MissingCovariates {
                        subject: subject(),
                        epoch: rec.epoch,
                    })
                }
                None => {}
            }
            prev = Some(rec);
        }
        let last = self.epochs.last().expect("non-empty");
        // follow-up ends at the event
        if let Some(i) = self.epochs.iter().position(|e| e.outcome) {
            if i + 1 != self.epochs.len() {
                return Err(CohortError::EpochGap {
                    subject: subject(),
                    expected: self.epochs[i].epoch,
                    found: last.epoch,
                });
            }
        }
        if !last.outcome && last.epoch != horizon {
            return Err(CohortError::TruncatedFollowUp {
                subject: subject(),
                last: last.epoch,
                horizon,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: Schema,
    pub trajectories: Vec<Trajectory>,
}

impl Cohort {
    /// Build a cohort, validating the schema and every trajectory.
    pub fn new(schema: Schema, trajectories: Vec<Trajectory>) -> Result<Self, CohortError> {
        schema.validate()?;
        for t in &trajectories {
            t.validate(&schema)?;
        }
        Ok(Self { schema, trajectories })
    }

    pub fn horizon(&self) -> u32 {
        self.schema.horizon
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub subjects: usize,
    pub person_epochs: usize,
    pub in_treatment_epochs: usize,
    pub horizon: u32,
    pub epoch_days: f64,
    pub los_days: LosStats,
    pub event_rate_in_treatment: f64,
    pub event_rate_post_stop: f64,
    pub composite_event_rate: f64,
    pub stopped_alive_rate: f64,
}

pub fn summarize_cohort(cohort: &Cohort) -> Result<CohortSummary, CohortError> {
    if cohort.is_empty() {
        return Err(CohortError::Empty);
    }
    let horizon = cohort.horizon();
    let n = cohort.len() as f64;
    let mut in_treatment = 0usize;
    let mut post_stop = 0usize;
    let mut stopped = 0usize;
    for t in &cohort.trajectories {
        match (t.event_epoch(), t.stop_epoch()) {
            (Some(_), None) => in_treatment += 1,
            (Some(_), Some(_)) => post_stop += 1,
            _ => {}
        }
        if t.stop_epoch().is_some() {
            stopped += 1;
        }
    }
    let rate_in = in_treatment as f64 / n;
    let rate_post = post_stop as f64 / n;
    Ok(CohortSummary {
        subjects: cohort.len(),
        person_epochs: cohort.trajectories.iter().map(|t| t.epochs.len()).sum(),
        in_treatment_epochs: cohort.trajectories.iter().map(Trajectory::observed_len).sum(),
        horizon,
        epoch_days: EPOCH_DAYS,
        los_days: LosStats::from_epochs(cohort.trajectories.iter().map(|t| t.tau(horizon))),
        event_rate_in_treatment: rate_in,
        event_rate_post_stop: rate_post,
        composite_event_rate: rate_in + rate_post,
        stopped_alive_rate: stopped as f64 / n,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn derived_stop_and_event_epochs() {
        let t = trajectory("a", 8, Some(3), Some(5));
        t.validate(&schema(8)).unwrap();
        assert_eq!(t.stop_epoch(), Some(3));
        assert_eq!(t.event_epoch(), Some(5));
        assert!(!t.died_in_treatment());
        assert_eq!(t.tau(8), 3);
        assert_eq!(t.observed_len(), 4);

        let d = trajectory("b", 8, None, Some(4));
        d.validate(&schema(8)).unwrap();
        assert!(d.died_in_treatment());
        assert_eq!(d.tau(8), 3);

        let n = trajectory("c", 8, None, None);
        n.validate(&schema(8)).unwrap();
        assert_eq!(n.tau(8), 7);
        assert_eq!(n.observed_len(), 8);
    }

    #[test]
    fn absorbing_violations_are_rejected() {
        let s = schema(4);
        let mut t = trajectory("a", 4, Some(1), None);
        t.epochs[3].treatment = true;
        assert!(matches!(
            t.validate(&s),
            Err(CohortError::TreatmentResumed { epoch: 3, .. })
        ));

        let mut t = trajectory("a", 4, Some(1), Some(3));
        t.epochs.push(EpochRecord {
            epoch: 4,
            covariates: None,
            treatment: false,
            outcome: false,
        });
        assert!(matches!(
            t.validate(&s),
            Err(CohortError::OutcomeNotAbsorbing { epoch: 4, .. })
        ));
    }

    #[test]
    fn summary_of_constant_stays() {
        let trajs = (0..5)
            .map(|i| trajectory(&format!("s{i}"), 10, Some(6), None))
            .collect();
        let c = Cohort::new(schema(10), trajs).unwrap();
        let s = summarize_cohort(&c).unwrap();
        assert_eq!(s.los_days.median, 3.0);
        assert_eq!(s.los_days.mean, 3.0);
        assert_eq!(s.composite_event_rate, 0.0);
    }

    #[test]
    fn summary_mortality_split_by_hand_count() {
        let mut trajs = vec![
            trajectory("d1", 8, None, Some(2)),
            trajectory("d2", 8, None, Some(5)),
            trajectory("p1", 8, Some(2), Some(6)),
        ];
        for i in 0..7 {
            trajs.push(trajectory(&format!("a{i}"), 8, Some(1 + i % 3), None));
        }
        let c = Cohort::new(schema(8), trajs).unwrap();
        let s = summarize_cohort(&c).unwrap();
        assert!((s.event_rate_in_treatment - 0.2).abs() < 1e-15);
        assert!((s.event_rate_post_stop - 0.1).abs() < 1e-15);
        assert!((s.composite_event_rate - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_cohort_summary_fails() {
        let c = Cohort::new(schema(4), vec![]).unwrap();
        assert!(matches!(summarize_cohort(&c), Err(CohortError::Empty)));
    }

    #[test]
    fn schema_requires_bounds_and_categories() {
        let mut s = schema(4);
        s.covariates[0].family = Distribution::TruncatedNormal;
        assert!(s.validate().is_err());
        s.covariates[0].bounds = Some([0.0, 1.0]);
        s.validate().unwrap();
        s.covariates[1].categories = Some(vec!["only".into()]);
        assert!(s.validate().is_err());
    }
}
