//! Fixed-length reductions of a growing history.
//!
//! A raw state is a schema-ordered slice of `Option<f64>` (categorical values
//! hold the category index). Each variable is encoded as its value (or K-1
//! dummies for categorical variables) plus, when missingness was seen in the
//! training data, a missing indicator. Missing values are zero-filled.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::cohort::{Aggregation, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableEncoding {
    pub name: String,
    /// Category labels, `None` for real-valued variables.
    pub categories: Option<Vec<String>>,
    pub missing_indicator: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl VariableEncoding {
    pub fn width(&self) -> usize {
        let base = match &self.categories {
            Some(c) => c.len() - 1,
            None => 1,
        };
        base + usize::from(self.missing_indicator)
    }

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        match &self.categories {
            Some(c) => {
                for label in &c[1..] {
                    out.push(format!("{prefix}{}={label}", self.name));
                }
            }
            None => out.push(format!("{prefix}{}", self.name)),
        }
        if self.missing_indicator {
            out.push(format!("{prefix}{}.missing", self.name));
        }
    }

    /// Append the encoding of `value`. `force_missing` marks undefined slots.
    fn encode(&self, value: Option<f64>, force_missing: bool, out: &mut Vec<f64>) {
        let value = if force_missing { None } else { value };
        match &self.categories {
            Some(c) => {
                let k = value.map(|v| v as usize);
                for j in 1..c.len() {
                    out.push(f64::from(k == Some(j)));
                }
            }
            None => out.push(value.unwrap_or(0.0)),
        }
        if self.missing_indicator {
            out.push(f64::from(value.is_none()));
        }
    }
}

/// The four model inputs, plus the position of a covariate model in the
/// sampling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Covariate at ordering position `p`, given the previous epoch and the
    /// covariates sampled before it in the same epoch.
    Covariate(usize),
    InTreatment,
    PostStop,
    Treatment,
}

impl FeatureKind {
    pub fn label(&self) -> String {
        match self {
            Self::Covariate(p) => format!("covariate[{p}]"),
            Self::InTreatment => "in-treatment-outcome".into(),
            Self::PostStop => "post-stop-outcome".into(),
            Self::Treatment => "treatment".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub baseline: Vec<VariableEncoding>,
    /// Schema-ordered covariates.
    pub covariates: Vec<VariableEncoding>,
    /// Sampling order as indices into `covariates`.
    pub ordering: Vec<usize>,
    /// Highest power of each time term.
    pub time_degree: u32,
    /// Whether the treatment model sees `t`.
    pub treatment_time: bool,
}

fn time_names(name: &str, degree: u32, out: &mut Vec<String>) {
    for d in 1..=degree {
        if d == 1 {
            out.push(name.to_string());
        } else {
            out.push(format!("{name}^{d}"));
        }
    }
}

fn push_time(value: f64, degree: u32, out: &mut Vec<f64>) {
    let mut p = 1.0;
    for _ in 0..degree {
        p *= value;
        out.push(p);
    }
}

/// Stay aggregate of one covariate over epochs `0..=tau`: the mean of observed
/// values (category frequencies for categorical covariates) or the last
/// observed value.
fn stay_encode(enc: &VariableEncoding, values: impl Iterator<Item = Option<f64>>, out: &mut Vec<f64>) {
    let observed = values.flatten();
    match (&enc.categories, enc.aggregation) {
        (Some(c), Aggregation::Mean) => {
            let mut counts = vec![0.0; c.len()];
            let mut n = 0.0;
            for v in observed {
                counts[v as usize] += 1.0;
                n += 1.0;
            }
            for count in &counts[1..] {
                out.push(if n > 0.0 { count / n } else { 0.0 });
            }
            if enc.missing_indicator {
                out.push(f64::from(n == 0.0));
            }
        }
        (_, Aggregation::LastValue) => enc.encode(observed.last(), false, out),
        (None, Aggregation::Mean) => {
            let (mut sum, mut n) = (0.0, 0.0);
            for v in observed {
                sum += v;
                n += 1.0;
            }
            enc.encode((n > 0.0).then(|| sum / n), false, out);
        }
    }
}

impl FeatureLayout {
    /// Layout for `schema`; missing indicators are added for the variables
    /// flagged in `baseline_missing` / `covariate_missing`.
    pub fn new(
        schema: &Schema,
        ordering: Option<&[String]>,
        baseline_missing: &[bool],
        covariate_missing: &[bool],
        time_degree: u32,
        treatment_time: bool,
    ) -> Result<Self, ModelError> {
        let ordering = match ordering {
            None => (0..schema.covariates.len()).collect(),
            Some(names) => {
                let mut idx = Vec::with_capacity(names.len());
                for n in names {
                    let i = schema
                        .covariate_index(n)
                        .ok_or_else(|| ModelError::UnknownCovariate(n.clone()))?;
                    if idx.contains(&i) {
                        return Err(ModelError::Ordering(format!("{n} listed twice")));
                    }
                    idx.push(i);
                }
                if idx.len() != schema.covariates.len() {
                    return Err(ModelError::Ordering(format!(
                        "ordering names {} of {} covariates",
                        idx.len(),
                        schema.covariates.len()
                    )));
                }
                idx
            }
        };
        if time_degree == 0 {
            return Err(ModelError::Ordering("time_degree must be at least 1".into()));
        }
        Ok(Self {
            baseline: schema
                .baseline
                .iter()
                .zip(baseline_missing)
                .map(|(b, &m)| VariableEncoding {
                    name: b.name.clone(),
                    categories: b.categories.clone(),
                    missing_indicator: m,
                    aggregation: Aggregation::LastValue,
                })
                .collect(),
            covariates: schema
                .covariates
                .iter()
                .zip(covariate_missing)
                .map(|(c, &m)| VariableEncoding {
                    name: c.name.clone(),
                    categories: c.categories.clone(),
                    missing_indicator: m,
                    aggregation: c.aggregation,
                })
                .collect(),
            ordering,
            time_degree,
            treatment_time,
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    fn state_names(&self, prefix: &str, out: &mut Vec<String>) {
        for c in &self.covariates {
            c.push_names(prefix, out);
        }
    }

    pub fn names(&self, kind: FeatureKind) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.baseline {
            b.push_names("", &mut out);
        }
        match kind {
            FeatureKind::Covariate(p) => {
                self.state_names("lag1.", &mut out);
                for &j in &self.ordering[..p] {
                    self.covariates[j].push_names("", &mut out);
                }
                time_names("t", self.time_degree, &mut out);
            }
            FeatureKind::InTreatment => {
                self.state_names("lag1.", &mut out);
                self.state_names("lag2.", &mut out);
                out.push("lag2.undefined".into());
                time_names("t", self.time_degree, &mut out);
            }
            FeatureKind::PostStop => {
                self.state_names("stay_mean.", &mut out);
                time_names("tau", self.time_degree, &mut out);
                time_names("since_stop", self.time_degree, &mut out);
            }
            FeatureKind::Treatment => {
                self.state_names("", &mut out);
                if self.treatment_time {
                    time_names("t", self.time_degree, &mut out);
                }
            }
        }
        out
    }

    pub fn width(&self, kind: FeatureKind) -> usize {
        self.names(kind).len()
    }

    /// Names of an epoch-0 covariate mechanism at ordering position `p`:
    /// baseline plus the covariates drawn before it.
    pub fn initial_names(&self, p: usize) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.baseline {
            b.push_names("", &mut out);
        }
        for &j in &self.ordering[..p] {
            self.covariates[j].push_names("", &mut out);
        }
        out
    }

    pub fn encode_initial(&self, baseline: &[Option<f64>], current: &[Option<f64>], p: usize, out: &mut Vec<f64>) {
        out.clear();
        self.encode_baseline(baseline, out);
        for &j in &self.ordering[..p] {
            self.covariates[j].encode(current[j], false, out);
        }
    }

    pub fn encode_baseline(&self, values: &[Option<f64>], out: &mut Vec<f64>) {
        for (enc, v) in self.baseline.iter().zip(values) {
            enc.encode(*v, false, out);
        }
    }

    fn encode_state(&self, state: &[Option<f64>], force_missing: bool, out: &mut Vec<f64>) {
        for (enc, v) in self.covariates.iter().zip(state) {
            enc.encode(*v, force_missing, out);
        }
    }

    /// Stay aggregate block over a flat path of `tau + 1` states.
    pub(crate) fn encode_stay(&self, path: &[Option<f64>], out: &mut Vec<f64>) {
        let n = self.n_covariates();
        for (j, enc) in self.covariates.iter().enumerate() {
            stay_encode(enc, path.iter().skip(j).step_by(n.max(1)).copied(), out);
        }
    }
}

/// History of one subject as the featurizers see it: baseline, the covariate
/// path while treated, and the stop epoch once stopped.
#[derive(Debug, Clone)]
pub struct SubjectHistory<'l> {
    layout: &'l FeatureLayout,
    baseline: Vec<f64>,
    /// Flat schema-ordered states for epochs `0..len`.
    path: Vec<Option<f64>>,
    stop: Option<u32>,
    stay: Vec<f64>,
}

impl<'l> SubjectHistory<'l> {
    pub fn new(layout: &'l FeatureLayout, baseline: &[Option<f64>]) -> Self {
        let mut encoded = Vec::new();
        layout.encode_baseline(baseline, &mut encoded);
        Self::from_encoded(layout, encoded)
    }

    pub(crate) fn from_encoded(layout: &'l FeatureLayout, baseline: Vec<f64>) -> Self {
        Self {
            layout,
            baseline,
            path: Vec::new(),
            stop: None,
            stay: Vec::new(),
        }
    }

    /// Number of recorded epochs.
    pub fn len(&self) -> u32 {
        (self.path.len() / self.layout.n_covariates().max(1)) as u32
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }

    pub fn stop_epoch(&self) -> Option<u32> {
        self.stop
    }

    pub fn state(&self, t: u32) -> Option<&[Option<f64>]> {
        let n = self.layout.n_covariates();
        let start = t as usize * n;
        self.path.get(start..start + n)
    }

    /// Record the covariates of the next epoch.
    pub fn push(&mut self, state: &[Option<f64>]) -> Result<(), ModelError> {
        if self.stop.is_some() {
            return Err(ModelError::KindMismatch {
                kind: "history".into(),
                t: self.len(),
                detail: "covariates recorded after stop".into(),
            });
        }
        if state.len() != self.layout.n_covariates() {
            return Err(ModelError::Width {
                expected: self.layout.n_covariates(),
                actual: state.len(),
            });
        }
        self.path.extend_from_slice(state);
        Ok(())
    }

    /// Mark the last recorded epoch as the stop decision and freeze the stay aggregate.
    pub fn stop_now(&mut self) -> Result<(), ModelError> {
        if self.stop.is_some() || self.is_empty() {
            return Err(ModelError::KindMismatch {
                kind: "history".into(),
                t: self.len(),
                detail: "stop requires a recorded epoch and no earlier stop".into(),
            });
        }
        let tau = self.len() - 1;
        self.stop = Some(tau);
        self.stay.clear();
        self.layout.encode_stay(&self.path, &mut self.stay);
        Ok(())
    }

    fn mismatch(&self, kind: FeatureKind, t: u32, detail: &str) -> ModelError {
        ModelError::KindMismatch {
            kind: kind.label(),
            t,
            detail: detail.to_string(),
        }
    }

    /// Build the feature vector of `kind` at epoch `t` into `out`.
    ///
    /// `current` holds the same-epoch covariates sampled so far (schema
    /// order); only the entries preceding the covariate's ordering position are
    /// read, and it is ignored by the other kinds.
    pub fn features(
        &self,
        kind: FeatureKind,
        t: u32,
        current: &[Option<f64>],
        out: &mut Vec<f64>,
    ) -> Result<(), ModelError> {
        let layout = self.layout;
        out.clear();
        out.extend_from_slice(&self.baseline);
        let treated_before = |t: u32| t >= 1 && self.stop.is_none_or(|s| t <= s);
        match kind {
            FeatureKind::Covariate(p) => {
                if p >= layout.ordering.len() {
                    return Err(self.mismatch(kind, t, "ordering position out of range"));
                }
                if !treated_before(t) || self.len() != t {
                    return Err(self.mismatch(kind, t, "needs a treated subject at t-1 with t epochs recorded"));
                }
                if current.len() != layout.n_covariates() {
                    return Err(ModelError::Width {
                        expected: layout.n_covariates(),
                        actual: current.len(),
                    });
                }
                layout.encode_state(self.state(t - 1).expect("recorded"), false, out);
                for &j in &layout.ordering[..p] {
                    layout.covariates[j].encode(current[j], false, out);
                }
                push_time(f64::from(t), layout.time_degree, out);
            }
            FeatureKind::InTreatment => {
                if !treated_before(t) || self.len() < t {
                    return Err(self.mismatch(kind, t, "in-treatment hazard needs treatment at t-1"));
                }
                layout.encode_state(self.state(t - 1).expect("recorded"), false, out);
                if t >= 2 {
                    layout.encode_state(self.state(t - 2).expect("recorded"), false, out);
                    out.push(0.0);
                } else {
                    layout.encode_state(self.state(0).expect("recorded"), true, out);
                    out.push(1.0);
                }
                push_time(f64::from(t), layout.time_degree, out);
            }
            FeatureKind::PostStop => {
                let Some(tau) = self.stop.filter(|&s| t > s) else {
                    return Err(self.mismatch(kind, t, "post-stop hazard needs a stop before t"));
                };
                out.extend_from_slice(&self.stay);
                push_time(f64::from(tau), layout.time_degree, out);
                push_time(f64::from(t - tau), layout.time_degree, out);
            }
            FeatureKind::Treatment => {
                let eligible = self.len() == t + 1 && (t == 0 || treated_before(t));
                if !eligible || self.stop.is_some() {
                    return Err(self.mismatch(kind, t, "treatment decision needs covariates at t while treated"));
                }
                layout.encode_state(self.state(t).expect("recorded"), false, out);
                if layout.treatment_time {
                    push_time(f64::from(t), layout.time_degree, out);
                }
            }
        }
        Ok(())
    }
}
