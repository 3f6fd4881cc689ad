//! Synthetic cohorts from fully specified mechanisms, and exact strategy
//! values by enumeration on small discrete instances.
//!
//! Mechanisms are GLMs over the same features the fitted models use, with
//! coefficients given by feature name (`intercept`, `sex=M`, `lag1.x1=1`,
//! `stay_mean.x2=1`, `t`, `tau`, `since_stop`, ...). Unnamed coefficients are 0.

mod exact;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    Aggregation, BaselineRecord, BaselineSpec, Cohort, CohortError, CovariateSpec, Distribution, EpochRecord, Schema,
    Trajectory,
};
use crate::glm::{Family, FittedGlm, GlmError};
use crate::models::{FeatureKind, FeatureLayout, FittedModels, ModelError, PoolEntry, SubjectHistory};
use crate::rng::{streams, substream};
use crate::strategy::{Behavior, CompiledStrategy, StrategyDef, StrategyError};

pub use exact::{exact_psi, ExactResult, MAX_STATES};

pub const BUNDLED_DISCRETE: &str = include_str!("../../configs/dgp_discrete.toml");
pub const BUNDLED_CONTINUOUS: &str = include_str!("../../configs/dgp_continuous.toml");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generating process: {0}")]
    Spec(String),
    #[error("{mechanism}: unknown feature {feature:?}")]
    UnknownFeature { mechanism: String, feature: String },
    #[error("exact enumeration needs a discrete process: {0}")]
    NotDiscrete(String),
    #[error("state space exceeds {limit} enumerated states")]
    Overflow { limit: u64 },
    #[error("cannot parse generating process: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("sampling {mechanism}: {source}")]
    Glm {
        mechanism: String,
        #[source]
        source: GlmError,
    },
}

pub type Coefficients = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mechanism {
    /// Logit coefficients per non-reference category label.
    PerCategory(BTreeMap<String, Coefficients>),
    Linear(Coefficients),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineMechanism {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateMechanism {
    pub name: String,
    pub family: Distribution,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    /// Residual standard deviation of continuous families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    /// Epoch-0 mechanism over baseline and earlier covariates.
    pub initial: Mechanism,
    /// Mechanism for later epochs over baseline, the previous epoch,
    /// earlier same-epoch covariates and time.
    pub transition: Mechanism,
    /// Logit of an exact zero (zero-inflated family).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_initial: Option<Coefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_transition: Option<Coefficients>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub name: String,
    pub version: u32,
    pub horizon: u32,
    #[serde(default = "one")]
    pub time_degree: u32,
    #[serde(default)]
    pub baseline: Vec<BaselineMechanism>,
    pub covariates: Vec<CovariateMechanism>,
    pub in_treatment_hazard: Coefficients,
    pub post_stop_hazard: Coefficients,
    /// Logit of continuing treatment over baseline, current covariates and `t`.
    #[serde(default)]
    pub policy: Coefficients,
    /// Deterministic behavior rule used instead of `policy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_rule: Option<StrategyDef>,
}

fn one() -> u32 {
    1
}

fn vectorize(mechanism: &str, coefs: &Coefficients, names: &[String]) -> Result<Vec<f64>, SynthError> {
    let mut v = vec![0.0; names.len() + 1];
    for (key, &value) in coefs {
        if !value.is_finite() {
            return Err(SynthError::Spec(format!(
                "{mechanism}: coefficient {key} is not finite"
            )));
        }
        if key == "intercept" {
            v[0] = value;
            continue;
        }
        let i = names
            .iter()
            .position(|n| n == key)
            .ok_or_else(|| SynthError::UnknownFeature {
                mechanism: mechanism.to_string(),
                feature: key.clone(),
            })?;
        v[i + 1] = value;
    }
    Ok(v)
}

/// True mechanisms as GLMs.
#[derive(Debug, Clone)]
pub(crate) struct Mechanisms {
    pub layout: FeatureLayout,
    pub schema: Schema,
    pub initial: Vec<FittedGlm>,
    pub transition: Vec<FittedGlm>,
    pub in_treatment: FittedGlm,
    pub post_stop: FittedGlm,
    pub policy: FittedGlm,
    pub policy_rule: Option<CompiledStrategy>,
}

impl DgpSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text)?;
        spec.mechanisms()?;
        Ok(spec)
    }

    pub fn bundled(name: &str) -> Result<Self, SynthError> {
        match name {
            "discrete" => Self::from_toml(BUNDLED_DISCRETE),
            "continuous" => Self::from_toml(BUNDLED_CONTINUOUS),
            other => Err(SynthError::Spec(format!("unknown bundled process {other:?}"))),
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            horizon: self.horizon,
            baseline: self
                .baseline
                .iter()
                .map(|b| BaselineSpec {
                    name: b.name.clone(),
                    categories: b.categories.clone(),
                })
                .collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| CovariateSpec {
                    name: c.name.clone(),
                    family: c.family,
                    aggregation: c.aggregation,
                    bounds: c.bounds,
                    categories: c.categories.clone(),
                })
                .collect(),
        }
    }

    /// Whether every variable is categorical, so the state space is finite.
    pub fn is_discrete(&self) -> bool {
        self.baseline.iter().all(|b| b.categories.is_some())
            && self.covariates.iter().all(|c| c.family == Distribution::Categorical)
    }

    pub(crate) fn mechanisms(&self) -> Result<Mechanisms, SynthError> {
        let schema = self.schema();
        schema.validate()?;
        for b in &self.baseline {
            match (&b.categories, &b.probabilities, b.mean, b.sd) {
                (Some(c), Some(p), None, None) if c.len() == p.len() => {
                    let total: f64 = p.iter().sum();
                    if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                        return Err(SynthError::Spec(format!("{}: probabilities must sum to 1", b.name)));
                    }
                }
                (None, None, Some(m), Some(sd)) if m.is_finite() && sd >= 0.0 => {}
                _ => {
                    return Err(SynthError::Spec(format!(
                        "baseline {} needs categories with matching probabilities, or mean and sd",
                        b.name
                    )))
                }
            }
        }
        let n_b = self.baseline.len();
        let n_c = self.covariates.len();
        let layout = FeatureLayout::new(
            &schema,
            None,
            &vec![false; n_b],
            &vec![false; n_c],
            self.time_degree,
            true,
        )?;

        let mut initial = Vec::with_capacity(n_c);
        let mut transition = Vec::with_capacity(n_c);
        for (p, c) in self.covariates.iter().enumerate() {
            initial.push(self.covariate_glm(
                c,
                &c.initial,
                c.zero_initial.as_ref(),
                &layout.initial_names(p),
                "initial",
            )?);
            transition.push(self.covariate_glm(
                c,
                &c.transition,
                c.zero_transition.as_ref(),
                &layout.names(FeatureKind::Covariate(p)),
                "transition",
            )?);
        }
        let in_treatment = FittedGlm::binomial(vectorize(
            "in_treatment_hazard",
            &self.in_treatment_hazard,
            &layout.names(FeatureKind::InTreatment),
        )?);
        let post_stop = FittedGlm::binomial(vectorize(
            "post_stop_hazard",
            &self.post_stop_hazard,
            &layout.names(FeatureKind::PostStop),
        )?);
        let policy = FittedGlm::binomial(vectorize(
            "policy",
            &self.policy,
            &layout.names(FeatureKind::Treatment),
        )?);
        let policy_rule = match &self.policy_rule {
            Some(rule) => {
                let compiled = rule.compile(&schema)?;
                if compiled.is_natural_course() {
                    return Err(SynthError::Spec("policy_rule must be deterministic".into()));
                }
                Some(compiled)
            }
            None => None,
        };
        Ok(Mechanisms {
            layout,
            schema,
            initial,
            transition,
            in_treatment,
            post_stop,
            policy,
            policy_rule,
        })
    }

    fn covariate_glm(
        &self,
        c: &CovariateMechanism,
        mechanism: &Mechanism,
        zero: Option<&Coefficients>,
        names: &[String],
        stage: &str,
    ) -> Result<FittedGlm, SynthError> {
        let label = format!("{}.{stage}", c.name);
        match (c.family, mechanism) {
            (Distribution::Categorical, Mechanism::PerCategory(blocks)) => {
                let cats = c.categories.as_deref().unwrap_or(&[]);
                for key in blocks.keys() {
                    if !cats[1..].contains(key) {
                        return Err(SynthError::Spec(format!(
                            "{label}: {key:?} is not a non-reference category"
                        )));
                    }
                }
                let empty = Coefficients::new();
                let vectors = cats[1..]
                    .iter()
                    .map(|k| vectorize(&label, blocks.get(k).unwrap_or(&empty), names))
                    .collect::<Result<_, _>>()?;
                Ok(FittedGlm::categorical(vectors))
            }
            (Distribution::Categorical, _) => Err(SynthError::Spec(format!(
                "{label}: categorical mechanisms are keyed by category label"
            ))),
            (family, Mechanism::Linear(coefs)) => {
                let sd =
                    c.sd.filter(|s| s.is_finite() && *s >= 0.0)
                        .ok_or_else(|| SynthError::Spec(format!("{label}: continuous mechanisms need sd")))?;
                let beta = vectorize(&label, coefs, names)?;
                let var = sd * sd;
                Ok(match family {
                    Distribution::Normal => FittedGlm::normal(beta, var),
                    Distribution::BoundedNormal => FittedGlm::continuous(Family::BoundedNormal, beta, var, c.bounds),
                    Distribution::TruncatedNormal => {
                        FittedGlm::continuous(Family::TruncatedNormal, beta, var, c.bounds)
                    }
                    Distribution::ZeroInflatedNormal => {
                        let z = zero.ok_or_else(|| {
                            SynthError::Spec(format!("{label}: zero-inflated mechanisms need zero coefficients"))
                        })?;
                        FittedGlm::zero_inflated(vectorize(&label, z, names)?, beta, var, c.bounds)
                    }
                    Distribution::Categorical => unreachable!("handled above"),
                })
            }
            (_, Mechanism::PerCategory(m)) if m.is_empty() => {
                let linear = Mechanism::Linear(Coefficients::new());
                self.covariate_glm(c, &linear, zero, names, stage)
            }
            (_, Mechanism::PerCategory(_)) => Err(SynthError::Spec(format!(
                "{label}: per-category coefficients on a continuous covariate"
            ))),
        }
    }

    /// Model suite holding the true mechanisms; the baseline pool is the exact
    /// epoch-0 distribution (discrete processes only).
    pub fn true_models(&self) -> Result<FittedModels, SynthError> {
        let m = self.mechanisms()?;
        if !self.is_discrete() {
            return Err(SynthError::NotDiscrete(
                "baseline pool needs enumerable epoch-0 states".into(),
            ));
        }
        let pool = exact::initial_states(self, &m)?
            .into_iter()
            .map(|(weight, baseline, covariates)| PoolEntry {
                weight,
                baseline,
                covariates,
            })
            .collect();
        let policy = match &self.policy_rule {
            None => m.policy.clone(),
            Some(_) => {
                return Err(SynthError::Spec(
                    "true models need a logistic policy; rule policies have no treatment model".into(),
                ))
            }
        };
        Ok(FittedModels::new(
            m.schema,
            m.layout,
            m.transition,
            m.in_treatment,
            m.post_stop,
            policy,
            pool,
        )?)
    }
}

fn draw_baseline<R: Rng>(spec: &DgpSpec, rng: &mut R) -> Vec<Option<f64>> {
    spec.baseline
        .iter()
        .map(|b| match (&b.probabilities, b.mean, b.sd) {
            (Some(p), _, _) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = p.len() - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                Some(k as f64)
            }
            (None, Some(m), Some(sd)) => {
                let z: f64 = rng.sample(StandardNormal);
                Some(m + sd * z)
            }
            _ => None,
        })
        .collect()
}

fn sample(glm: &FittedGlm, x: &[f64], rng: &mut impl Rng, probs: &mut Vec<f64>, name: &str) -> Result<f64, SynthError> {
    glm.sample_with(x, rng, probs).map_err(|source| SynthError::Glm {
        mechanism: name.to_string(),
        source,
    })
}

fn continue_probability(
    m: &Mechanisms,
    history: &SubjectHistory<'_>,
    t: u32,
    x: &mut Vec<f64>,
) -> Result<f64, SynthError> {
    history.features(FeatureKind::Treatment, t, &[], x)?;
    m.policy.predict_mean(x).map_err(|source| SynthError::Glm {
        mechanism: "policy".into(),
        source,
    })
}

fn behave(
    m: &Mechanisms,
    history: &SubjectHistory<'_>,
    t: u32,
    state: &[Option<f64>],
    rng: &mut impl Rng,
    x: &mut Vec<f64>,
) -> Result<bool, SynthError> {
    match &m.policy_rule {
        Some(rule) => Ok(rule.action(t, state, Behavior::None)?),
        None => {
            let p = continue_probability(m, history, t, x)?;
            Ok(rng.random::<f64>() < p)
        }
    }
}

fn generate_subject(spec: &DgpSpec, m: &Mechanisms, i: u64, seed: u64) -> Result<Trajectory, SynthError> {
    let mut rng = substream(seed, streams::SYNTH, i);
    let horizon = spec.horizon;
    let n_c = m.layout.n_covariates();
    let mut x = Vec::new();
    let mut probs = Vec::new();
    let baseline = draw_baseline(spec, &mut rng);
    let mut history = SubjectHistory::new(&m.layout, &baseline);

    let mut current = vec![None; n_c];
    for (p, &j) in m.layout.ordering.iter().enumerate() {
        m.layout.encode_initial(&baseline, &current, p, &mut x);
        current[j] = Some(sample(
            &m.initial[p],
            &x,
            &mut rng,
            &mut probs,
            &spec.covariates[j].name,
        )?);
    }
    history.push(&current)?;
    let mut treated = behave(m, &history, 0, &current, &mut rng, &mut x)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        covariates: Some(current.clone()),
        treatment: treated,
        outcome: false,
    }];
    if !treated {
        history.stop_now()?;
    }
    for t in 1..=horizon {
        let (kind, hazard) = if treated {
            (FeatureKind::InTreatment, &m.in_treatment)
        } else {
            (FeatureKind::PostStop, &m.post_stop)
        };
        history.features(kind, t, &[], &mut x)?;
        let h = hazard.predict_mean(&x).map_err(|source| SynthError::Glm {
            mechanism: "hazard".into(),
            source,
        })?;
        if rng.random::<f64>() < h {
            epochs.push(EpochRecord {
                epoch: t,
                covariates: None,
                treatment: treated,
                outcome: true,
            });
            break;
        }
        if t == horizon || !treated {
            epochs.push(EpochRecord {
                epoch: t,
                covariates: None,
                treatment: treated,
                outcome: false,
            });
            continue;
        }
        current.iter_mut().for_each(|v| *v = None);
        for (p, &j) in m.layout.ordering.iter().enumerate() {
            history.features(FeatureKind::Covariate(p), t, &current, &mut x)?;
            current[j] = Some(sample(
                &m.transition[p],
                &x,
                &mut rng,
                &mut probs,
                &spec.covariates[j].name,
            )?);
        }
        history.push(&current)?;
        treated = behave(m, &history, t, &current, &mut rng, &mut x)?;
        epochs.push(EpochRecord {
            epoch: t,
            covariates: Some(current.clone()),
            treatment: treated,
            outcome: false,
        });
        if !treated {
            history.stop_now()?;
        }
    }
    Ok(Trajectory {
        baseline: BaselineRecord {
            subject_id: format!("s{i}"),
            values: baseline,
        },
        epochs,
    })
}

/// Sample `n` subjects from the process. Subject `i` uses substream `i` of
/// the synth stream, so the cohort does not depend on the worker count.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Cohort, SynthError> {
    let m = spec.mechanisms()?;
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_subject(spec, &m, i, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cohort::new(m.schema, trajectories)?)
}

/// Ground truth written next to a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: DgpSpec,
    pub exact: Vec<(String, ExactResult)>,
}
