//! History featurization and the fitted model suite: one density per
//! time-varying covariate, the in-treatment and post-stop outcome hazards and
//! the natural-course treatment model.

mod features;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortError, Schema};
use crate::glm::{fit_glm, Design, Family, FitOptions, FittedGlm, GlmError};

pub use features::{FeatureKind, FeatureLayout, SubjectHistory, VariableEncoding};

/// Linear predictors beyond this magnitude on training rows flag a
/// (near-)separable discrete fit.
pub const SEPARATION_ETA: f64 = 15.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("fitting {model}: {source}")]
    Fit {
        model: String,
        #[source]
        source: GlmError,
    },
    #[error("evaluating {model}: {source}")]
    Predict {
        model: String,
        #[source]
        source: GlmError,
    },
    #[error("insufficient post-stop events: found {found}, need at least {required}")]
    InsufficientPostStopEvents { found: f64, required: f64 },
    #[error("{kind} features requested at epoch {t}: {detail}")]
    KindMismatch { kind: String, t: u32, detail: String },
    #[error("unknown covariate {0:?}")]
    UnknownCovariate(String),
    #[error("invalid covariate ordering: {0}")]
    Ordering(String),
    #[error("state has {actual} values, layout has {expected}")]
    Width { expected: usize, actual: usize },
    #[error("subject weights: expected {expected}, got {actual}")]
    Weights { expected: usize, actual: usize },
    #[error("fitted models are inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Within-epoch sampling order; schema order when absent.
    pub ordering: Option<Vec<String>>,
    pub time_degree: u32,
    /// Include `t` in the treatment model.
    pub treatment_time: bool,
    pub min_post_stop_events: f64,
    pub fit: FitOptions,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            ordering: None,
            time_degree: 1,
            treatment_time: true,
            min_post_stop_events: 5.0,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub features: Vec<String>,
    pub glm: FittedGlm,
}

/// A joint epoch-0 state: baseline values and first-epoch covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub weight: f64,
    pub baseline: Vec<Option<f64>>,
    pub covariates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModels {
    pub schema: Schema,
    pub layout: FeatureLayout,
    pub horizon: u32,
    /// In sampling order.
    pub covariate_models: Vec<ModelEntry>,
    pub in_treatment_hazard: ModelEntry,
    pub post_stop_hazard: ModelEntry,
    pub treatment_model: ModelEntry,
    pub baseline_pool: Vec<PoolEntry>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FittedModels {
    /// Assemble a model suite, checking every model against the layout.
    pub fn new(
        schema: Schema,
        layout: FeatureLayout,
        covariate_models: Vec<FittedGlm>,
        in_treatment: FittedGlm,
        post_stop: FittedGlm,
        treatment: FittedGlm,
        baseline_pool: Vec<PoolEntry>,
    ) -> Result<Self, ModelError> {
        let entry = |kind: FeatureKind, name: String, glm: FittedGlm| ModelEntry {
            name,
            features: layout.names(kind),
            glm,
        };
        let covariate_models = covariate_models
            .into_iter()
            .enumerate()
            .map(|(p, glm)| {
                let name = layout
                    .covariates
                    .get(layout.ordering.get(p).copied().unwrap_or(usize::MAX))
                    .map_or_else(|| format!("covariate[{p}]"), |c| c.name.clone());
                entry(FeatureKind::Covariate(p), name, glm)
            })
            .collect();
        let models = Self {
            horizon: schema.horizon,
            in_treatment_hazard: entry(FeatureKind::InTreatment, "in-treatment-hazard".into(), in_treatment),
            post_stop_hazard: entry(FeatureKind::PostStop, "post-stop-hazard".into(), post_stop),
            treatment_model: entry(FeatureKind::Treatment, "treatment".into(), treatment),
            schema,
            layout,
            covariate_models,
            baseline_pool,
            warnings: Vec::new(),
        };
        models.check()?;
        Ok(models)
    }

    /// Structural consistency: model widths, families and pool shape.
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Inconsistent(m));
        if self.covariate_models.len() != self.layout.n_covariates()
            || self.layout.n_covariates() != self.schema.covariates.len()
        {
            return bad("covariate model count does not match the schema".into());
        }
        let mut all: Vec<(FeatureKind, &ModelEntry)> = self
            .covariate_models
            .iter()
            .enumerate()
            .map(|(p, m)| (FeatureKind::Covariate(p), m))
            .collect();
        all.push((FeatureKind::InTreatment, &self.in_treatment_hazard));
        all.push((FeatureKind::PostStop, &self.post_stop_hazard));
        all.push((FeatureKind::Treatment, &self.treatment_model));
        for (kind, m) in all {
            let width = self.layout.width(kind);
            if m.glm.n_features() != width {
                return bad(format!(
                    "{} expects {} features, layout gives {width}",
                    m.name,
                    m.glm.n_features()
                ));
            }
            let expected = match kind {
                FeatureKind::Covariate(p) => Some(self.schema.covariates[self.layout.ordering[p]].glm_family()),
                _ => Some(Family::Binomial),
            };
            if expected != Some(m.glm.family) {
                return bad(format!("{} has family {}", m.name, m.glm.family.name()));
            }
        }
        if self.baseline_pool.is_empty() || self.baseline_pool.iter().all(|e| e.weight <= 0.0) {
            return bad("empty baseline pool".into());
        }
        for e in &self.baseline_pool {
            if e.baseline.len() != self.schema.baseline.len()
                || e.covariates.len() != self.schema.covariates.len()
                || !(e.weight >= 0.0)
            {
                return bad("malformed baseline pool entry".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("models serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Training rows of one model, deduplicated: identical (features, response)
/// pairs share a row whose weight is the total of their subject weights.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub name: String,
    pub family: Family,
    pub kind: FeatureKind,
    pub design: Design,
    pub response: Vec<f64>,
    row_unique: Vec<u32>,
    row_subject: Vec<u32>,
    index: HashMap<Vec<u64>, u32>,
}

impl ModelData {
    fn new(name: String, family: Family, kind: FeatureKind, width: usize) -> Self {
        Self {
            name,
            family,
            kind,
            design: Design::new(width),
            response: Vec::new(),
            row_unique: Vec::new(),
            row_subject: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, subject: usize, x: &[f64], y: f64) {
        let mut key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        key.push(y.to_bits());
        let next = self.response.len() as u32;
        let u = *self.index.entry(key).or_insert(next);
        if u == next {
            self.design.push_row(x).expect("layout width");
            self.response.push(y);
        }
        self.row_unique.push(u);
        self.row_subject.push(subject as u32);
    }

    /// Number of raw (person-epoch) rows.
    pub fn n_rows(&self) -> usize {
        self.row_unique.len()
    }

    pub fn weights(&self, subject_weights: Option<&[f64]>) -> Vec<f64> {
        let mut w = vec![0.0; self.response.len()];
        for (&u, &s) in self.row_unique.iter().zip(&self.row_subject) {
            w[u as usize] += subject_weights.map_or(1.0, |sw| sw[s as usize]);
        }
        w
    }

    fn fit(&self, weights: &[f64], opts: &FitOptions) -> Result<(FittedGlm, Option<String>), ModelError> {
        let glm = fit_glm(self.family, &self.design, &self.response, Some(weights), opts).map_err(|source| {
            ModelError::Fit {
                model: self.name.clone(),
                source,
            }
        })?;
        let warning = separation(&glm, &self.design, weights).map(|eta| {
            format!(
                "{}: near-separable fit (max |linear predictor| {eta:.1} on training rows); coefficients are held finite by the ridge penalty",
                self.name
            )
        });
        Ok((glm, warning))
    }
}

fn separation(glm: &FittedGlm, design: &Design, weights: &[f64]) -> Option<f64> {
    let blocks: Vec<&[f64]> = match (&glm.family, &glm.category_coefficients) {
        (Family::Binomial, _) => vec![&glm.coefficients],
        (Family::Categorical { .. }, Some(b)) => b.iter().map(Vec::as_slice).collect(),
        _ => return None,
    };
    let mut max = 0.0f64;
    for i in 0..design.nrows() {
        if weights[i] <= 0.0 {
            continue;
        }
        let x = design.row(i);
        for b in &blocks {
            let eta = b[0] + b[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
            max = max.max(eta.abs());
        }
    }
    (max > SEPARATION_ETA).then_some(max)
}

/// Training data for the whole suite, built once and refit under any
/// subject weighting (bootstrap multiplicities).
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub schema: Schema,
    pub layout: FeatureLayout,
    pub options: ModelOptions,
    /// In sampling order.
    pub covariates: Vec<ModelData>,
    pub in_treatment: ModelData,
    pub post_stop: ModelData,
    pub treatment: ModelData,
    /// Epoch-0 state per subject.
    pub initial: Vec<(Vec<Option<f64>>, Vec<Option<f64>>)>,
}

impl TrainingData {
    pub fn build(cohort: &Cohort, options: &ModelOptions) -> Result<Self, ModelError> {
        let schema = &cohort.schema;
        if cohort.is_empty() {
            return Err(CohortError::Empty.into());
        }
        let mut baseline_missing = vec![false; schema.baseline.len()];
        let mut covariate_missing = vec![false; schema.covariates.len()];
        for t in &cohort.trajectories {
            for (m, v) in baseline_missing.iter_mut().zip(&t.baseline.values) {
                *m |= v.is_none();
            }
            for e in &t.epochs {
                if let Some(values) = &e.covariates {
                    for (m, v) in covariate_missing.iter_mut().zip(values) {
                        *m |= v.is_none();
                    }
                }
            }
        }
        let layout = FeatureLayout::new(
            schema,
            options.ordering.as_deref(),
            &baseline_missing,
            &covariate_missing,
            options.time_degree,
            options.treatment_time,
        )?;

        let covariates: Vec<ModelData> = layout
            .ordering
            .iter()
            .enumerate()
            .map(|(p, &j)| {
                let spec = &schema.covariates[j];
                ModelData::new(
                    spec.name.clone(),
                    spec.glm_family(),
                    FeatureKind::Covariate(p),
                    layout.width(FeatureKind::Covariate(p)),
                )
            })
            .collect();
        let binomial = |name: &str, kind| ModelData::new(name.into(), Family::Binomial, kind, layout.width(kind));
        let mut data = Self {
            in_treatment: binomial("in-treatment-hazard", FeatureKind::InTreatment),
            post_stop: binomial("post-stop-hazard", FeatureKind::PostStop),
            treatment: binomial("treatment", FeatureKind::Treatment),
            covariates,
            initial: Vec::with_capacity(cohort.len()),
            schema: schema.clone(),
            layout: layout.clone(),
            options: options.clone(),
        };

        let mut x = Vec::new();
        for (s, traj) in cohort.trajectories.iter().enumerate() {
            let mut history = SubjectHistory::new(&layout, &traj.baseline.values);
            let first = traj.observed(0).ok_or_else(|| {
                ModelError::Inconsistent(format!("subject {} has no epoch-0 covariates", traj.subject_id()))
            })?;
            data.initial.push((traj.baseline.values.clone(), first.to_vec()));
            for rec in &traj.epochs {
                let t = rec.epoch;
                if t >= 1 {
                    let y = f64::from(u8::from(rec.outcome));
                    if history.stop_epoch().is_none() {
                        history.features(FeatureKind::InTreatment, t, &[], &mut x)?;
                        data.in_treatment.push(s, &x, y);
                    } else {
                        history.features(FeatureKind::PostStop, t, &[], &mut x)?;
                        data.post_stop.push(s, &x, y);
                    }
                }
                let Some(values) = &rec.covariates else { continue };
                if t >= 1 {
                    for (p, &j) in layout.ordering.iter().enumerate() {
                        if let Some(v) = values[j] {
                            history.features(FeatureKind::Covariate(p), t, values, &mut x)?;
                            data.covariates[p].push(s, &x, v);
                        }
                    }
                }
                history.push(values)?;
                history.features(FeatureKind::Treatment, t, &[], &mut x)?;
                data.treatment.push(s, &x, f64::from(u8::from(rec.treatment)));
                if !rec.treatment {
                    history.stop_now()?;
                }
            }
        }
        Ok(data)
    }

    pub fn n_subjects(&self) -> usize {
        self.initial.len()
    }

    /// Fit every model. `subject_weights` are per-subject frequency weights
    /// (bootstrap multiplicities); `None` weighs every subject once.
    pub fn fit(&self, subject_weights: Option<&[f64]>) -> Result<FittedModels, ModelError> {
        if let Some(w) = subject_weights {
            if w.len() != self.n_subjects() {
                return Err(ModelError::Weights {
                    expected: self.n_subjects(),
                    actual: w.len(),
                });
            }
        }
        let post_weights = self.post_stop.weights(subject_weights);
        let events: f64 = post_weights
            .iter()
            .zip(&self.post_stop.response)
            .filter(|(_, &y)| y == 1.0)
            .map(|(w, _)| w)
            .sum();
        if events < self.options.min_post_stop_events {
            return Err(ModelError::InsufficientPostStopEvents {
                found: events,
                required: self.options.min_post_stop_events,
            });
        }

        let mut all: Vec<&ModelData> = self.covariates.iter().collect();
        all.extend([&self.in_treatment, &self.post_stop, &self.treatment]);
        let fits: Vec<(FittedGlm, Option<String>)> = all
            .par_iter()
            .map(|d| d.fit(&d.weights(subject_weights), &self.options.fit))
            .collect::<Result<_, _>>()?;
        let mut warnings: Vec<String> = fits.iter().filter_map(|(_, w)| w.clone()).collect();
        let mut glms: Vec<FittedGlm> = fits.into_iter().map(|(g, _)| g).collect();
        let treatment = glms.pop().expect("treatment");
        let post_stop = glms.pop().expect("post-stop");
        let in_treatment = glms.pop().expect("in-treatment");

        let baseline_pool = self
            .initial
            .iter()
            .enumerate()
            .map(|(s, (b, l))| PoolEntry {
                weight: subject_weights.map_or(1.0, |w| w[s]),
                baseline: b.clone(),
                covariates: l.clone(),
            })
            .filter(|e| e.weight > 0.0)
            .collect();
        let mut models = FittedModels::new(
            self.schema.clone(),
            self.layout.clone(),
            glms,
            in_treatment,
            post_stop,
            treatment,
            baseline_pool,
        )?;
        models.warnings.append(&mut warnings);
        Ok(models)
    }
}

/// Fit the full model suite on a cohort.
pub fn fit_all(cohort: &Cohort, options: &ModelOptions) -> Result<FittedModels, ModelError> {
    TrainingData::build(cohort, options)?.fit(None)
}
