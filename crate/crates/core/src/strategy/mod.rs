//! Stopping strategies: static day-k rules, threshold rule sets and the
//! natural course.
//!
//! Strategies are plain config. A compiled strategy resolves covariate names
//! against a schema once and is then evaluated on raw schema-ordered states.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Distribution, Schema};

mod validate;

pub use validate::{validate_strategy, Issue, IssueKind, Severity, ValidationReport};

pub const BUNDLED_DS1: &str = include_str!("../../configs/ds1.toml");
pub const BUNDLED_KNIGHT: &str = include_str!("../../configs/knight.toml");
pub const BUNDLED_ICU_SCHEMA: &str = include_str!("../../configs/icu_schema.toml");

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("strategy {name:?} is invalid: {issues}")]
    Invalid { name: String, issues: String },
    #[error("natural-course decisions need a treatment model probability or an observed action")]
    MissingBehavior,
    #[error("state has {actual} covariates, strategy was compiled for {expected}")]
    Width { expected: usize, actual: usize },
    #[error("cannot parse strategy: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown bundled strategy {0:?}")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "in")]
    In,
    #[serde(rename = "not-in")]
    NotIn,
}

impl Comparator {
    pub fn symbol(&self) -> &'static str {
        match self {
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
            Self::Eq => "==",
            Self::Ne => "!=",
            Self::In => "in",
            Self::NotIn => "not-in",
        }
    }

    fn numeric(&self, v: f64, threshold: f64) -> bool {
        match self {
            Self::Lt => v < threshold,
            Self::Le => v <= threshold,
            Self::Gt => v > threshold,
            Self::Ge => v >= threshold,
            Self::Eq => v == threshold,
            Self::Ne => v != threshold,
            Self::In | Self::NotIn => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    TreatAsFalse,
    TreatAsTrue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdClause {
    pub covariate: String,
    pub op: Comparator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Category labels for categorical covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default)]
    pub missing: MissingPolicy,
}

/// Nested any/all groups of clauses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rule {
    Any { any: Vec<Rule> },
    All { all: Vec<Rule> },
    Clause(ThresholdClause),
}

impl Rule {
    pub fn clause(covariate: &str, op: Comparator, threshold: f64) -> Self {
        Self::Clause(ThresholdClause {
            covariate: covariate.into(),
            op,
            threshold: Some(threshold),
            categories: None,
            missing: MissingPolicy::TreatAsFalse,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Continue while `t < stop_epoch`; `stop_epoch = 0` stops immediately.
    Static {
        stop_epoch: u32,
    },
    /// Continue while any component fires.
    ContinueIfAny {
        components: Vec<Component>,
    },
    /// Stop once every criterion holds.
    StopOnlyIfAll {
        criteria: Vec<Component>,
    },
    NaturalCourse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: StrategyKind,
}

impl StrategyDef {
    pub fn static_stop(stop_epoch: u32) -> Self {
        Self {
            name: format!("static({stop_epoch})"),
            kind: StrategyKind::Static { stop_epoch },
        }
    }

    pub fn natural_course() -> Self {
        Self {
            name: "natural-course".into(),
            kind: StrategyKind::NaturalCourse,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, StrategyError> {
        Ok(toml::from_str(text)?)
    }

    pub fn bundled(name: &str) -> Result<Self, StrategyError> {
        match name {
            "ds1" => Self::from_toml(BUNDLED_DS1),
            "knight" => Self::from_toml(BUNDLED_KNIGHT),
            "natural-course" => Ok(Self::natural_course()),
            other => Err(StrategyError::UnknownBundled(other.into())),
        }
    }

    pub fn is_natural_course(&self) -> bool {
        matches!(self.kind, StrategyKind::NaturalCourse)
    }

    pub fn compile(&self, schema: &Schema) -> Result<CompiledStrategy, StrategyError> {
        let report = validate_strategy(self, schema);
        if report.has_errors() {
            return Err(StrategyError::Invalid {
                name: self.name.clone(),
                issues: report.summary(),
            });
        }
        let n_covariates = schema.covariates.len();
        let kind = match &self.kind {
            StrategyKind::Static { stop_epoch } => Compiled::Static(*stop_epoch),
            StrategyKind::NaturalCourse => Compiled::NaturalCourse,
            StrategyKind::ContinueIfAny { components } => {
                Compiled::ContinueIfAny(compile_components(components, schema))
            }
            StrategyKind::StopOnlyIfAll { criteria } => Compiled::StopOnlyIfAll(compile_components(criteria, schema)),
        };
        Ok(CompiledStrategy {
            name: self.name.clone(),
            n_covariates,
            kind,
        })
    }
}

/// Parse a schema from TOML.
pub fn schema_from_toml(text: &str) -> Result<Schema, toml::de::Error> {
    toml::from_str(text)
}

pub fn bundled_icu_schema() -> Schema {
    schema_from_toml(BUNDLED_ICU_SCHEMA).expect("bundled schema parses")
}

#[derive(Debug, Clone, PartialEq)]
enum Test {
    Numeric { op: Comparator, threshold: f64 },
    Category { set: Vec<bool>, negate: bool },
}

#[derive(Debug, Clone, PartialEq)]
enum CompiledRule {
    Any(Vec<CompiledRule>),
    All(Vec<CompiledRule>),
    Clause { index: usize, test: Test, missing: bool },
}

impl CompiledRule {
    fn eval(&self, state: &[Option<f64>]) -> bool {
        match self {
            Self::Any(rules) => rules.iter().any(|r| r.eval(state)),
            Self::All(rules) => rules.iter().all(|r| r.eval(state)),
            Self::Clause { index, test, missing } => match state[*index] {
                None => *missing,
                Some(v) => match test {
                    Test::Numeric { op, threshold } => op.numeric(v, *threshold),
                    Test::Category { set, negate } => {
                        let hit = v >= 0.0 && set.get(v as usize).copied().unwrap_or(false);
                        hit != *negate
                    }
                },
            },
        }
    }
}

fn compile_rule(rule: &Rule, schema: &Schema) -> CompiledRule {
    match rule {
        Rule::Any { any } => CompiledRule::Any(any.iter().map(|r| compile_rule(r, schema)).collect()),
        Rule::All { all } => CompiledRule::All(all.iter().map(|r| compile_rule(r, schema)).collect()),
        Rule::Clause(c) => {
            let index = schema.covariate_index(&c.covariate).expect("validated");
            let spec = &schema.covariates[index];
            let test = if spec.family == Distribution::Categorical {
                let labels = spec.categories.as_deref().unwrap_or(&[]);
                let wanted = c.categories.as_deref().unwrap_or(&[]);
                let set = labels.iter().map(|l| wanted.contains(l)).collect();
                Test::Category {
                    set,
                    negate: matches!(c.op, Comparator::NotIn | Comparator::Ne),
                }
            } else {
                Test::Numeric {
                    op: c.op,
                    threshold: c.threshold.expect("validated"),
                }
            };
            CompiledRule::Clause {
                index,
                test,
                missing: c.missing == MissingPolicy::TreatAsTrue,
            }
        }
    }
}

fn compile_components(components: &[Component], schema: &Schema) -> Vec<(String, CompiledRule)> {
    components
        .iter()
        .map(|c| (c.name.clone(), compile_rule(&c.rule, schema)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    Static(u32),
    ContinueIfAny(Vec<(String, CompiledRule)>),
    StopOnlyIfAll(Vec<(String, CompiledRule)>),
    NaturalCourse,
}

/// Source of the action for natural-course decisions.
pub enum Behavior<'a> {
    None,
    /// Replay the action observed in the data.
    Observed(bool),
    /// Draw continue with the given probability.
    Sampled {
        continue_probability: f64,
        rng: &'a mut dyn RngCore,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    /// true = continue treatment.
    pub action: bool,
    /// Components that fired (continue-if-any) or criteria not yet met
    /// (stop-only-if-all).
    pub triggered: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledStrategy {
    pub name: String,
    n_covariates: usize,
    kind: Compiled,
}

impl CompiledStrategy {
    pub fn is_natural_course(&self) -> bool {
        matches!(self.kind, Compiled::NaturalCourse)
    }

    pub fn is_deterministic(&self) -> bool {
        !self.is_natural_course()
    }

    fn check(&self, state: &[Option<f64>]) -> Result<(), StrategyError> {
        if state.len() != self.n_covariates {
            return Err(StrategyError::Width {
                expected: self.n_covariates,
                actual: state.len(),
            });
        }
        Ok(())
    }

    /// Action at epoch `t` for a treated, alive subject with covariates `state`.
    pub fn action(&self, t: u32, state: &[Option<f64>], behavior: Behavior<'_>) -> Result<bool, StrategyError> {
        self.check(state)?;
        Ok(match &self.kind {
            Compiled::Static(k) => t < *k,
            Compiled::ContinueIfAny(components) => components.iter().any(|(_, r)| r.eval(state)),
            Compiled::StopOnlyIfAll(criteria) => !criteria.iter().all(|(_, r)| r.eval(state)),
            Compiled::NaturalCourse => match behavior {
                Behavior::None => return Err(StrategyError::MissingBehavior),
                Behavior::Observed(a) => a,
                Behavior::Sampled {
                    continue_probability,
                    rng,
                } => rng.random::<f64>() < continue_probability,
            },
        })
    }

    /// Like [`CompiledStrategy::action`], also reporting which rules fired.
    pub fn decide(&self, t: u32, state: &[Option<f64>], behavior: Behavior<'_>) -> Result<Decision, StrategyError> {
        let action = self.action(t, state, behavior)?;
        let triggered = match &self.kind {
            Compiled::ContinueIfAny(components) => components
                .iter()
                .filter(|(_, r)| r.eval(state))
                .map(|(n, _)| n.clone())
                .collect(),
            Compiled::StopOnlyIfAll(criteria) => criteria
                .iter()
                .filter(|(_, r)| !r.eval(state))
                .map(|(n, _)| n.clone())
                .collect(),
            _ => Vec::new(),
        };
        Ok(Decision { action, triggered })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn icu_state(schema: &Schema, values: &[(&str, f64)]) -> Vec<Option<f64>> {
        // comfortably inside every DS1 and Knight range
        let defaults = [
            ("vent_mode", 3.0),
            ("hours_since_vent_mode", 0.0),
            ("paco2", 40.0),
            ("pao2", 90.0),
            ("o2_flow", 2.0),
            ("spo2", 97.0),
            ("resp_rate", 16.0),
            ("gcs", 15.0),
            ("lactate", 1.0),
            ("urine_output", 60.0),
            ("urea", 5.0),
            ("creatinine", 80.0),
            ("map", 80.0),
            ("heart_rate", 80.0),
            ("hemoglobin", 120.0),
            ("temperature", 36.8),
            ("aptt", 30.0),
            ("bicarbonate", 24.0),
        ];
        let mut state = vec![None; schema.covariates.len()];
        for (name, v) in defaults.iter().chain(values) {
            state[schema.covariate_index(name).unwrap()] = Some(*v);
        }
        state
    }

    #[test]
    fn ds1_red_flags() {
        let schema = bundled_icu_schema();
        assert_eq!(schema.covariates.len(), 18);
        let ds1 = StrategyDef::bundled("ds1").unwrap().compile(&schema).unwrap();
        let d = ds1
            .decide(4, &icu_state(&schema, &[("map", 45.0)]), Behavior::None)
            .unwrap();
        assert!(d.action);
        assert_eq!(d.triggered, vec!["hemodynamic"]);
        let d = ds1
            .decide(4, &icu_state(&schema, &[("gcs", 5.0)]), Behavior::None)
            .unwrap();
        assert!(d.action);
        assert_eq!(d.triggered, vec!["neurologic"]);
        let d = ds1.decide(4, &icu_state(&schema, &[]), Behavior::None).unwrap();
        assert!(!d.action);
        assert!(d.triggered.is_empty());
        // unknown ventilation mode with a fast respiratory rate
        let d = ds1
            .decide(
                4,
                &icu_state(&schema, &[("vent_mode", 0.0), ("resp_rate", 50.0)]),
                Behavior::None,
            )
            .unwrap();
        assert_eq!(d.triggered, vec!["respiratory"]);
        // the same rate under assisted ventilation is not a flag
        let d = ds1
            .decide(
                4,
                &icu_state(&schema, &[("vent_mode", 2.0), ("resp_rate", 50.0)]),
                Behavior::None,
            )
            .unwrap();
        assert!(!d.action);
    }

    #[test]
    fn knight_needs_every_criterion() {
        let schema = bundled_icu_schema();
        let knight = StrategyDef::bundled("knight").unwrap().compile(&schema).unwrap();
        assert!(!knight.action(3, &icu_state(&schema, &[]), Behavior::None).unwrap());
        let d = knight
            .decide(3, &icu_state(&schema, &[("heart_rate", 60.0)]), Behavior::None)
            .unwrap();
        assert!(d.action);
        assert_eq!(d.triggered, vec!["heart_rate"]);
        let mut missing = icu_state(&schema, &[]);
        missing[schema.covariate_index("urea").unwrap()] = None;
        assert!(knight.action(3, &missing, Behavior::None).unwrap());
    }

    #[test]
    fn static_rule_on_the_half_day_grid() {
        let schema = bundled_icu_schema();
        let g = StrategyDef::static_stop(6).compile(&schema).unwrap();
        let s = icu_state(&schema, &[]);
        assert!(g.action(3, &s, Behavior::None).unwrap());
        assert!(!g.action(6, &s, Behavior::None).unwrap());
    }

    #[test]
    fn natural_course_needs_behavior() {
        let schema = bundled_icu_schema();
        let g = StrategyDef::natural_course().compile(&schema).unwrap();
        let s = icu_state(&schema, &[]);
        assert!(matches!(
            g.action(0, &s, Behavior::None),
            Err(StrategyError::MissingBehavior)
        ));
        assert!(!g.action(0, &s, Behavior::Observed(false)).unwrap());
        let mut rng = crate::rng::substream(1, "test", 0);
        assert!(g
            .action(
                0,
                &s,
                Behavior::Sampled {
                    continue_probability: 1.0,
                    rng: &mut rng
                }
            )
            .unwrap());
    }

    #[test]
    fn def_round_trips_through_toml() {
        let ds1 = StrategyDef::bundled("ds1").unwrap();
        let text = toml::to_string(&ds1).unwrap();
        assert_eq!(StrategyDef::from_toml(&text).unwrap(), ds1);
        let s: StrategyDef = toml::from_str("name = \"day3\"\nkind = \"static\"\nstop_epoch = 6\n").unwrap();
        assert_eq!(s.kind, StrategyKind::Static { stop_epoch: 6 });
    }
}
