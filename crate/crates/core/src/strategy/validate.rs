use serde::{Deserialize, Serialize};

use super::{Comparator, Component, Rule, StrategyDef, StrategyKind, ThresholdClause};
use crate::cohort::{Distribution, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IssueKind {
    UnknownCovariate,
    ComparatorMismatch,
    UnknownCategory,
    MissingThreshold,
    UnreachableClause,
    AlwaysTrueClause,
    EmptyGroup,
    StaticOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub kind: IssueKind,
    /// `component/child-index/...` path of the offending clause.
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub strategy: String,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    pub fn summary(&self) -> String {
        self.issues
            .iter()
            .map(|i| format!("{}: {}", i.location, i.message))
            .collect::<Vec<_>>()
            .join("; ")
    }

    fn push(&mut self, severity: Severity, kind: IssueKind, location: &str, message: String) {
        self.issues.push(Issue {
            severity,
            kind,
            location: location.to_string(),
            message,
        });
    }
}

/// Check a strategy against a schema. Never fails; problems are reported.
pub fn validate_strategy(def: &StrategyDef, schema: &Schema) -> ValidationReport {
    let mut report = ValidationReport {
        strategy: def.name.clone(),
        issues: Vec::new(),
    };
    match &def.kind {
        StrategyKind::Static { stop_epoch } => {
            if *stop_epoch >= schema.horizon {
                report.push(
                    Severity::Error,
                    IssueKind::StaticOutOfRange,
                    "stop_epoch",
                    format!(
                        "stop epoch {stop_epoch} outside [0, {}]",
                        schema.horizon.saturating_sub(1)
                    ),
                );
            }
        }
        StrategyKind::NaturalCourse => {}
        StrategyKind::ContinueIfAny { components } => check_components(components, schema, &mut report),
        StrategyKind::StopOnlyIfAll { criteria } => check_components(criteria, schema, &mut report),
    }
    report
}

fn check_components(components: &[Component], schema: &Schema, report: &mut ValidationReport) {
    if components.is_empty() {
        report.push(
            Severity::Error,
            IssueKind::EmptyGroup,
            "",
            "rule strategy has no components".into(),
        );
    }
    for c in components {
        check_rule(&c.rule, &c.name, schema, report);
    }
}

fn check_rule(rule: &Rule, location: &str, schema: &Schema, report: &mut ValidationReport) {
    match rule {
        Rule::Any { any: rules } | Rule::All { all: rules } => {
            if rules.is_empty() {
                report.push(
                    Severity::Error,
                    IssueKind::EmptyGroup,
                    location,
                    "empty rule group".into(),
                );
            }
            for (i, r) in rules.iter().enumerate() {
                check_rule(r, &format!("{location}/{i}"), schema, report);
            }
        }
        Rule::Clause(c) => check_clause(c, location, schema, report),
    }
}

fn check_clause(c: &ThresholdClause, location: &str, schema: &Schema, report: &mut ValidationReport) {
    let Some(index) = schema.covariate_index(&c.covariate) else {
        report.push(
            Severity::Error,
            IssueKind::UnknownCovariate,
            location,
            format!("unknown covariate {:?}", c.covariate),
        );
        return;
    };
    let spec = &schema.covariates[index];
    if spec.family == Distribution::Categorical {
        let ok_op = matches!(
            c.op,
            Comparator::In | Comparator::NotIn | Comparator::Eq | Comparator::Ne
        );
        let Some(cats) = c.categories.as_ref().filter(|_| ok_op && c.threshold.is_none()) else {
            report.push(
                Severity::Error,
                IssueKind::ComparatorMismatch,
                location,
                format!(
                    "categorical covariate {} needs `in`, `not-in`, `==` or `!=` with category labels",
                    c.covariate
                ),
            );
            return;
        };
        if matches!(c.op, Comparator::Eq | Comparator::Ne) && cats.len() != 1 {
            report.push(
                Severity::Error,
                IssueKind::ComparatorMismatch,
                location,
                format!("`{}` takes exactly one category", c.op.symbol()),
            );
        }
        let labels = spec.categories.as_deref().unwrap_or(&[]);
        for cat in cats {
            if !labels.contains(cat) {
                report.push(
                    Severity::Error,
                    IssueKind::UnknownCategory,
                    location,
                    format!("{} has no category {cat:?}", c.covariate),
                );
            }
        }
        return;
    }
    if matches!(c.op, Comparator::In | Comparator::NotIn) || c.categories.is_some() {
        report.push(
            Severity::Error,
            IssueKind::ComparatorMismatch,
            location,
            format!(
                "`{}` with categories on real-valued covariate {}",
                c.op.symbol(),
                c.covariate
            ),
        );
        return;
    }
    let Some(threshold) = c.threshold.filter(|v| v.is_finite()) else {
        report.push(
            Severity::Error,
            IssueKind::MissingThreshold,
            location,
            format!("clause on {} needs a finite threshold", c.covariate),
        );
        return;
    };
    if let Some([lo, hi]) = spec.bounds {
        let (never, always) = match c.op {
            Comparator::Lt => (threshold <= lo, threshold > hi),
            Comparator::Le => (threshold < lo, threshold >= hi),
            Comparator::Gt => (threshold >= hi, threshold < lo),
            Comparator::Ge => (threshold > hi, threshold <= lo),
            Comparator::Eq => (threshold < lo || threshold > hi, false),
            Comparator::Ne => (false, threshold < lo || threshold > hi),
            Comparator::In | Comparator::NotIn => (false, false),
        };
        let text = format!("{} {} {threshold}", c.covariate, c.op.symbol());
        if never {
            report.push(
                Severity::Warning,
                IssueKind::UnreachableClause,
                location,
                format!("{text} can never hold within declared bounds [{lo}, {hi}]"),
            );
        } else if always {
            report.push(
                Severity::Warning,
                IssueKind::AlwaysTrueClause,
                location,
                format!("{text} always holds within declared bounds [{lo}, {hi}]"),
            );
        }
    }
}
