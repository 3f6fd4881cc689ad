use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ess_ratio, DiagnosticsError, EssSummary, TidyRow};
use crate::cohort::{Cohort, Trajectory};
use crate::models::{FeatureKind, FittedModels, SubjectHistory};
use crate::strategy::{Behavior, CompiledStrategy, StrategyDef};

/// Probability below which an importance weight is flagged.
pub const NEAR_VIOLATION: f64 = 1e-8;

/// Which observed trajectories count as history-compatible at epoch `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryMatching {
    /// Observed decisions agree with the strategy at every earlier epoch.
    #[default]
    Exact,
    /// Every subject still treated and event-free.
    AtRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositivityOptions {
    pub history: HistoryMatching,
    /// Coverage and ESS ratios below this are reported as warnings.
    pub warning_threshold: f64,
    pub near_violation: f64,
}

impl Default for PositivityOptions {
    fn default() -> Self {
        Self {
            history: HistoryMatching::Exact,
            warning_threshold: 0.3,
            near_violation: NEAR_VIOLATION,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// History-compatible states.
    pub compatible: usize,
    /// Compatible states whose observed decision equals the prescription.
    pub matched: usize,
    /// matched / compatible; `None` when nothing is compatible.
    pub rho: Option<f64>,
}

impl Coverage {
    fn finish(mut self) -> Self {
        self.rho = (self.compatible > 0).then(|| self.matched as f64 / self.compatible as f64);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPositivity {
    pub epoch: u32,
    pub all: Coverage,
    /// States where the strategy prescribes continuing.
    pub prescribed_continue: Coverage,
    pub prescribed_stop: Coverage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<EssSummary>,
    #[serde(default)]
    pub near_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub strategy: String,
    pub history: HistoryMatching,
    pub warning_threshold: f64,
    pub epochs: Vec<EpochPositivity>,
    pub warnings: Vec<String>,
}

/// One matched observation with its importance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub subject: String,
    pub epoch: u32,
    pub action: bool,
    /// Natural-course probability of the observed action.
    pub probability: f64,
    pub weight: f64,
    pub near_violation: bool,
}

#[derive(Debug, Clone, Copy)]
struct StateOutcome {
    epoch: u32,
    compatible: bool,
    prescribed: bool,
    observed: bool,
}

fn prescription(g: &CompiledStrategy, t: u32, state: &[Option<f64>], observed: bool) -> Result<bool, DiagnosticsError> {
    Ok(g.action(t, state, Behavior::Observed(observed))?)
}

/// Every observed in-treatment state of one subject, with its compatibility
/// and the strategy's prescription.
fn walk(
    traj: &Trajectory,
    g: &CompiledStrategy,
    history: HistoryMatching,
) -> Result<Vec<StateOutcome>, DiagnosticsError> {
    let mut out = Vec::new();
    let mut agree = true;
    for rec in &traj.epochs {
        let Some(state) = rec.covariates.as_deref() else { break };
        let prescribed = prescription(g, rec.epoch, state, rec.treatment)?;
        let compatible = match history {
            HistoryMatching::Exact => agree,
            HistoryMatching::AtRisk => true,
        };
        out.push(StateOutcome {
            epoch: rec.epoch,
            compatible,
            prescribed,
            observed: rec.treatment,
        });
        agree &= prescribed == rec.treatment;
    }
    Ok(out)
}

fn weights_for(
    traj: &Trajectory,
    g: &CompiledStrategy,
    models: &FittedModels,
    history: HistoryMatching,
    near_violation: f64,
) -> Result<Vec<WeightRecord>, DiagnosticsError> {
    let mut h = SubjectHistory::new(&models.layout, &traj.baseline.values);
    let mut x = Vec::new();
    let mut out = Vec::new();
    let outcomes = walk(traj, g, history)?;
    for (o, rec) in outcomes.iter().zip(&traj.epochs) {
        let state = rec.covariates.as_deref().expect("walked states are observed");
        h.push(state)?;
        if o.compatible && o.prescribed == o.observed {
            h.features(FeatureKind::Treatment, o.epoch, &[], &mut x)?;
            let p = models.treatment_model.glm.predict_mean(&x)?;
            let probability = if o.observed { p } else { 1.0 - p };
            out.push(WeightRecord {
                subject: traj.subject_id().to_string(),
                epoch: o.epoch,
                action: o.observed,
                probability,
                weight: 1.0 / probability,
                near_violation: probability < near_violation,
            });
        }
        if !o.observed {
            break;
        }
    }
    Ok(out)
}

/// Importance weights `1 / f(observed action | history)` of every matched
/// observation, in cohort order.
pub fn is_weights(
    cohort: &Cohort,
    strategy: &StrategyDef,
    models: &FittedModels,
    options: &PositivityOptions,
) -> Result<Vec<WeightRecord>, DiagnosticsError> {
    let g = strategy.compile(&cohort.schema)?;
    let nested = cohort
        .trajectories
        .par_iter()
        .map(|t| weights_for(t, &g, models, options.history, options.near_violation))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Coverage of `strategy` by the observed decisions, per epoch. With a model
/// suite, importance-weight concentration is added.
pub fn positivity_report(
    cohort: &Cohort,
    strategy: &StrategyDef,
    models: Option<&FittedModels>,
    options: &PositivityOptions,
) -> Result<PositivityReport, DiagnosticsError> {
    let g = strategy.compile(&cohort.schema)?;
    let horizon = cohort.horizon();
    let walks = cohort
        .trajectories
        .par_iter()
        .map(|t| walk(t, &g, options.history))
        .collect::<Result<Vec<_>, _>>()?;
    let mut epochs: Vec<EpochPositivity> = (0..horizon)
        .map(|epoch| EpochPositivity {
            epoch,
            all: Coverage::default(),
            prescribed_continue: Coverage::default(),
            prescribed_stop: Coverage::default(),
            weights: None,
            near_violations: 0,
        })
        .collect();
    for o in walks.iter().flatten().filter(|o| o.compatible) {
        let e = &mut epochs[o.epoch as usize];
        let matched = usize::from(o.prescribed == o.observed);
        let split = if o.prescribed {
            &mut e.prescribed_continue
        } else {
            &mut e.prescribed_stop
        };
        split.compatible += 1;
        split.matched += matched;
        e.all.compatible += 1;
        e.all.matched += matched;
    }

    if let Some(models) = models {
        let records = is_weights(cohort, strategy, models, options)?;
        let mut by_epoch: Vec<Vec<f64>> = vec![Vec::new(); horizon as usize];
        for r in &records {
            by_epoch[r.epoch as usize].push(r.weight);
            epochs[r.epoch as usize].near_violations += usize::from(r.near_violation);
        }
        for (e, w) in epochs.iter_mut().zip(&by_epoch) {
            if !w.is_empty() && w.iter().all(|v| v.is_finite()) {
                e.weights = Some(ess_ratio(w)?);
            }
        }
    }

    let mut warnings = Vec::new();
    for e in &mut epochs {
        e.all = e.all.finish();
        e.prescribed_continue = e.prescribed_continue.finish();
        e.prescribed_stop = e.prescribed_stop.finish();
        if let Some(rho) = e.all.rho.filter(|&r| r < options.warning_threshold) {
            warnings.push(format!(
                "epoch {}: coverage {rho:.3} below {}",
                e.epoch, options.warning_threshold
            ));
        }
        if let Some(w) = e.weights.filter(|w| w.ratio < options.warning_threshold) {
            warnings.push(format!(
                "epoch {}: ESS ratio {:.3} below {}",
                e.epoch, w.ratio, options.warning_threshold
            ));
        }
        if e.near_violations > 0 {
            warnings.push(format!(
                "epoch {}: {} observations with action probability below {}",
                e.epoch, e.near_violations, options.near_violation
            ));
        }
    }
    Ok(PositivityReport {
        strategy: strategy.name.clone(),
        history: options.history,
        warning_threshold: options.warning_threshold,
        epochs,
        warnings,
    })
}

impl PositivityReport {
    /// Long-format rows: epoch, metric, value, decision split.
    pub fn tidy(&self) -> Vec<TidyRow> {
        let mut rows = Vec::new();
        for e in &self.epochs {
            for (split, c) in [
                ("all", &e.all),
                ("continue", &e.prescribed_continue),
                ("stop", &e.prescribed_stop),
            ] {
                rows.push(TidyRow::new(e.epoch, "compatible", c.compatible as f64, split));
                rows.push(TidyRow::new(e.epoch, "matched", c.matched as f64, split));
                rows.push(TidyRow::maybe(e.epoch, "rho", c.rho, split));
            }
            if let Some(w) = &e.weights {
                rows.push(TidyRow::new(e.epoch, "cv", w.cv, "all"));
                rows.push(TidyRow::new(e.epoch, "ess", w.ess, "all"));
                rows.push(TidyRow::new(e.epoch, "ess_ratio", w.ratio, "all"));
                rows.push(TidyRow::new(
                    e.epoch,
                    "near_violations",
                    e.near_violations as f64,
                    "all",
                ));
            }
        }
        rows
    }
}
