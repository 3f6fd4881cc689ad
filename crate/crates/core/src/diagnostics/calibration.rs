use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DiagnosticsError, TidyRow};
use crate::cohort::{Cohort, Schema};
use crate::engine::SimulatedTrajectory;
use crate::stats::{mean, sample_variance, DistributionSummary};

pub const POOLED_SD_CONVENTION: &str =
    "pooled sd = sqrt((var_observed + var_simulated) / 2) with unbiased sample variances; missing values excluded";

/// One covariate, or one category indicator of a categorical covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdRow {
    pub covariate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
    pub epoch: u32,
    pub n_observed: usize,
    pub n_simulated: usize,
    pub mean_observed: f64,
    pub mean_simulated: f64,
    /// `None` when either arm has fewer than two records, or both are constant
    /// at different values.
    pub smd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    /// State at the stop decision.
    Stop,
    /// Last state before an in-treatment event.
    InTreatmentDeath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSummary {
    pub covariate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
    pub endpoint: Endpoint,
    pub observed: DistributionSummary,
    pub simulated: DistributionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub convention: String,
    pub rows: Vec<SmdRow>,
    pub endpoints: Vec<EndpointSummary>,
}

impl CalibrationReport {
    /// Largest |SMD| over epochs `< max_epoch` among computed rows.
    pub fn max_abs_smd(&self, max_epoch: u32) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.epoch < max_epoch)
            .filter_map(|r| r.smd)
            .map(f64::abs)
            .reduce(f64::max)
    }

    pub fn tidy(&self) -> Vec<TidyRow> {
        self.rows
            .iter()
            .map(|r| {
                let metric = match &r.level {
                    Some(l) => format!("smd:{}={l}", r.covariate),
                    None => format!("smd:{}", r.covariate),
                };
                TidyRow::maybe(r.epoch, &metric, r.smd, "all")
            })
            .collect()
    }
}

/// Standardized mean difference of two samples.
pub fn smd(observed: &[f64], simulated: &[f64]) -> Result<f64, String> {
    if observed.len() < 2 || simulated.len() < 2 {
        return Err("fewer than 2 records".into());
    }
    let diff = mean(observed) - mean(simulated);
    let pooled = ((sample_variance(observed) + sample_variance(simulated)) / 2.0).sqrt();
    if pooled > 0.0 {
        Ok(diff / pooled)
    } else if diff == 0.0 {
        Ok(0.0)
    } else {
        Err("both samples constant at different values".into())
    }
}

/// Value columns of the comparison: the covariate itself, or one indicator per level.
fn columns(schema: &Schema) -> Vec<(usize, String, Option<(usize, String)>)> {
    let mut out = Vec::new();
    for (j, c) in schema.covariates.iter().enumerate() {
        match &c.categories {
            Some(levels) => {
                for (k, l) in levels.iter().enumerate() {
                    out.push((j, c.name.clone(), Some((k, l.clone()))));
                }
            }
            None => out.push((j, c.name.clone(), None)),
        }
    }
    out
}

fn value(state: &[Option<f64>], j: usize, level: Option<usize>) -> Option<f64> {
    let v = state.get(j).copied().flatten()?;
    Some(match level {
        Some(k) => f64::from(v as usize == k),
        None => v,
    })
}

/// Per-covariate, per-epoch SMDs between observed in-treatment states and a
/// simulated natural course with retained paths.
pub fn smd_over_time(
    observed: &Cohort,
    simulated: &[SimulatedTrajectory],
) -> Result<CalibrationReport, DiagnosticsError> {
    let width = observed.schema.covariates.len();
    let mut sim_paths = Vec::with_capacity(simulated.len());
    for s in simulated {
        let path = s.path.as_ref().ok_or(DiagnosticsError::MissingPaths)?;
        if let Some(state) = path.iter().find(|p| p.len() != width) {
            return Err(DiagnosticsError::Width {
                expected: width,
                actual: state.len(),
            });
        }
        sim_paths.push(path);
    }
    let horizon = observed.horizon();
    let cols = columns(&observed.schema);
    let rows: Vec<Vec<SmdRow>> = (0..horizon)
        .into_par_iter()
        .map(|t| {
            let obs_states: Vec<&[Option<f64>]> =
                observed.trajectories.iter().filter_map(|tr| tr.observed(t)).collect();
            let sim_states: Vec<&[Option<f64>]> = sim_paths
                .iter()
                .filter_map(|p| p.get(t as usize).map(Vec::as_slice))
                .collect();
            cols.iter()
                .map(|(j, name, level)| {
                    let k = level.as_ref().map(|l| l.0);
                    let o: Vec<f64> = obs_states.iter().filter_map(|s| value(s, *j, k)).collect();
                    let s: Vec<f64> = sim_states.iter().filter_map(|s| value(s, *j, k)).collect();
                    let result = smd(&o, &s);
                    SmdRow {
                        covariate: name.clone(),
                        level: level.as_ref().map(|l| l.1.clone()),
                        epoch: t,
                        n_observed: o.len(),
                        n_simulated: s.len(),
                        mean_observed: mean(&o),
                        mean_simulated: mean(&s),
                        smd: result.as_ref().ok().copied(),
                        note: result.err(),
                    }
                })
                .collect()
        })
        .collect();

    let mut endpoints = Vec::new();
    for endpoint in [Endpoint::Stop, Endpoint::InTreatmentDeath] {
        let obs_states: Vec<&[Option<f64>]> = observed
            .trajectories
            .iter()
            .filter_map(|tr| match endpoint {
                Endpoint::Stop => tr.stop_epoch().and_then(|s| tr.observed(s)),
                Endpoint::InTreatmentDeath => tr.died_in_treatment().then(|| tr.observed(tr.tau(horizon))).flatten(),
            })
            .collect();
        let sim_states: Vec<&[Option<f64>]> = simulated
            .iter()
            .zip(&sim_paths)
            .filter(|(s, _)| match endpoint {
                Endpoint::Stop => s.stopped,
                Endpoint::InTreatmentDeath => s.died_in_treatment,
            })
            .filter_map(|(s, p)| p.get(s.tau as usize).map(Vec::as_slice))
            .collect();
        for (j, name, level) in &cols {
            let k = level.as_ref().map(|l| l.0);
            let o: Vec<f64> = obs_states.iter().filter_map(|s| value(s, *j, k)).collect();
            let s: Vec<f64> = sim_states.iter().filter_map(|s| value(s, *j, k)).collect();
            endpoints.push(EndpointSummary {
                covariate: name.clone(),
                level: level.as_ref().map(|l| l.1.clone()),
                endpoint,
                observed: DistributionSummary::of(&o),
                simulated: DistributionSummary::of(&s),
            });
        }
    }
    Ok(CalibrationReport {
        convention: POOLED_SD_CONVENTION.into(),
        rows: rows.into_iter().flatten().collect(),
        endpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::{schema, trajectory};

    fn as_simulated(c: &Cohort) -> Vec<SimulatedTrajectory> {
        c.trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| SimulatedTrajectory {
                subject: i as u64,
                outcome: t.event_epoch().is_some(),
                event_epoch: t.event_epoch(),
                tau: t.tau(c.horizon()),
                stopped: t.stop_epoch().is_some(),
                died_in_treatment: t.died_in_treatment(),
                path: Some(
                    (0..t.observed_len() as u32)
                        .map(|e| t.observed(e).unwrap().to_vec())
                        .collect(),
                ),
            })
            .collect()
    }

    #[test]
    fn unit_gap() {
        // two points at mean ± 1/√2 have unit sample variance
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let a = [10.0 - h, 10.0 + h];
        let b = [11.0 - h, 11.0 + h];
        assert!((smd(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn antisymmetric_and_guarded() {
        let a = [1.0, 2.0, 4.0];
        let b = [0.5, 3.0, 3.5, 7.0];
        assert_eq!(smd(&a, &b).unwrap(), -smd(&b, &a).unwrap());
        assert!(smd(&[1.0], &b).is_err());
        assert_eq!(smd(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(smd(&[2.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn copy_of_observed_has_zero_smd() {
        let c = Cohort::new(
            schema(6),
            vec![
                trajectory("a", 6, Some(1), None),
                trajectory("b", 6, None, Some(4)),
                trajectory("c", 6, Some(3), Some(5)),
                trajectory("d", 6, None, None),
            ],
        )
        .unwrap();
        let r = smd_over_time(&c, &as_simulated(&c)).unwrap();
        assert!(r.rows.iter().filter_map(|r| r.smd).all(|v| v == 0.0));
        // x, then both flag levels
        assert_eq!(r.rows.len(), 6 * 3);
        let last = r.rows.iter().find(|r| r.epoch == 5).unwrap();
        assert!(last.smd.is_none() && last.note.is_some());
        let stop = r
            .endpoints
            .iter()
            .find(|e| e.endpoint == Endpoint::Stop && e.covariate == "x")
            .unwrap();
        assert_eq!(stop.observed, stop.simulated);
        assert_eq!(stop.observed.n, 2);
    }

    #[test]
    fn paths_are_required() {
        let c = Cohort::new(schema(4), vec![trajectory("a", 4, None, None)]).unwrap();
        let mut sims = as_simulated(&c);
        sims[0].path = None;
        assert!(matches!(smd_over_time(&c, &sims), Err(DiagnosticsError::MissingPaths)));
    }
}
