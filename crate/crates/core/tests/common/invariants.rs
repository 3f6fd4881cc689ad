//! Randomized invariant checks shared by the property tests and the
//! acceptance harness.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use stopeval::cohort::Cohort;
use stopeval::engine::{estimate, simulate_cohort, SimulatedTrajectory, SimulationOptions, Simulator};
use stopeval::models::FittedModels;
use stopeval::strategy::{
    Behavior, Comparator, Component, MissingPolicy, Rule, StrategyDef, StrategyKind, ThresholdClause,
};
use stopeval::synth::{generate, DgpSpec};

pub const CASES: u32 = 1_000;

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

/// Discrete process with perturbed hazard and policy intercepts.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub in_treatment: f64,
    pub post_stop: f64,
    pub policy: f64,
    pub seed: u64,
    pub n: usize,
    pub strategy: usize,
}

impl Fixture {
    pub fn spec(&self) -> DgpSpec {
        let mut d = DgpSpec::bundled("discrete").unwrap();
        d.in_treatment_hazard.insert("intercept".into(), self.in_treatment);
        d.post_stop_hazard.insert("intercept".into(), self.post_stop);
        d.policy.insert("intercept".into(), self.policy);
        d
    }

    pub fn strategy(&self, horizon: u32) -> StrategyDef {
        let k = self.strategy as u32;
        if k < horizon {
            return StrategyDef::static_stop(k);
        }
        match k - horizon {
            0 => StrategyDef::natural_course(),
            1 => categorical_rule("x1"),
            _ => categorical_rule("x2"),
        }
    }
}

pub fn categorical_rule(covariate: &str) -> StrategyDef {
    StrategyDef {
        name: format!("continue-while-{covariate}"),
        kind: StrategyKind::ContinueIfAny {
            components: vec![Component {
                name: covariate.into(),
                rule: Rule::Clause(ThresholdClause {
                    covariate: covariate.into(),
                    op: Comparator::In,
                    threshold: None,
                    categories: Some(vec!["1".into()]),
                    missing: MissingPolicy::TreatAsFalse,
                }),
            }],
        },
    }
}

fn fixture() -> impl Strategy<Value = Fixture> {
    (
        -4.0..-1.0f64,
        -4.0..-1.0f64,
        -1.0..3.0f64,
        any::<u64>(),
        1..40usize,
        0..11usize,
    )
        .prop_map(|(in_treatment, post_stop, policy, seed, n, strategy)| Fixture {
            in_treatment,
            post_stop,
            policy,
            seed,
            n,
            strategy,
        })
}

fn simulate(
    f: &Fixture,
    workers: Option<usize>,
    paths: bool,
) -> Result<(FittedModels, Vec<SimulatedTrajectory>), TestCaseError> {
    let spec = f.spec();
    let models = spec.true_models().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let g = f.strategy(spec.horizon);
    let opts = SimulationOptions {
        n: f.n,
        seed: f.seed,
        retain_paths: paths,
        workers,
    };
    let sims = simulate_cohort(&models, &g, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
    Ok((models, sims))
}

fn check_cohort(c: &Cohort) -> Result<(), TestCaseError> {
    let horizon = c.horizon();
    for tr in &c.trajectories {
        for w in tr.epochs.windows(2) {
            prop_assert!(
                !w[0].outcome || w[1].outcome,
                "outcome resurrected in {}",
                tr.subject_id()
            );
            prop_assert!(
                w[0].treatment || !w[1].treatment,
                "treatment resumed in {}",
                tr.subject_id()
            );
        }
        let tau = tr.tau(horizon);
        prop_assert!(tau < horizon);
        match (tr.stop_epoch(), tr.event_epoch()) {
            (Some(s), _) => {
                prop_assert_eq!(tau, s);
                for e in &tr.epochs {
                    prop_assert_eq!(e.treatment, e.epoch < s);
                }
            }
            (None, Some(d)) => prop_assert_eq!(tau + 1, d),
            (None, None) => prop_assert_eq!(tau, horizon - 1),
        }
    }
    Ok(())
}

fn check_simulated(s: &SimulatedTrajectory, horizon: u32) -> Result<(), TestCaseError> {
    prop_assert!(s.tau < horizon);
    prop_assert_eq!(s.outcome, s.event_epoch.is_some());
    if let Some(d) = s.event_epoch {
        prop_assert!((1..=horizon).contains(&d));
    }
    if s.died_in_treatment {
        prop_assert!(!s.stopped);
        prop_assert_eq!(s.event_epoch, Some(s.tau + 1));
    }
    if s.stopped {
        prop_assert!(s.event_epoch.is_none_or(|d| d > s.tau));
    }
    if !s.stopped && !s.died_in_treatment {
        prop_assert_eq!(s.tau, horizon - 1);
        prop_assert!(!s.outcome);
    }
    // covariates exist exactly while treated
    let path = s.path.as_ref().expect("paths retained");
    prop_assert_eq!(path.len() as u32, s.tau + 1);
    Ok(())
}

/// Outcome and treatment are absorbing in generated cohorts and in
/// simulated trajectories, and τ is consistent with both.
pub fn absorbing_processes(cases: u32) -> Result<(), String> {
    run(cases, fixture(), |f| {
        let cohort = generate(&f.spec(), f.n, f.seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
        check_cohort(&cohort)?;
        let (models, sims) = simulate(&f, None, true)?;
        for s in &sims {
            check_simulated(s, models.horizon)?;
        }
        Ok(())
    })
}

/// In-treatment and post-stop mortality add up to ψ̂.
pub fn split_additivity(cases: u32) -> Result<(), String> {
    run(cases, fixture(), |f| {
        let (_, sims) = simulate(&f, None, false)?;
        let e = estimate(&sims).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((e.in_treatment + e.post_stop - e.psi).abs() <= 1e-12);
        let events = sims.iter().filter(|s| s.outcome).count() as f64;
        prop_assert!((e.psi - events / sims.len() as f64).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&e.psi));
        Ok(())
    })
}

/// Fixed seed gives identical trajectories for any worker count.
pub fn worker_determinism(cases: u32) -> Result<(), String> {
    run(cases, (fixture(), 2..6usize), |(f, workers)| {
        let (_, one) = simulate(&f, Some(1), true)?;
        let (_, many) = simulate(&f, Some(workers), true)?;
        prop_assert_eq!(&one, &many);
        let (_, again) = simulate(&f, Some(workers), true)?;
        prop_assert_eq!(&many, &again);
        Ok(())
    })
}

#[derive(Debug, Clone)]
struct RandomRule {
    clauses: Vec<ThresholdClause>,
    extra: ThresholdClause,
    state: Vec<Option<f64>>,
    t: u32,
}

fn clause() -> impl Strategy<Value = ThresholdClause> {
    let ops = prop_oneof![
        Just(Comparator::Lt),
        Just(Comparator::Le),
        Just(Comparator::Gt),
        Just(Comparator::Ge),
        Just(Comparator::Eq),
        Just(Comparator::Ne),
    ];
    let missing = prop_oneof![Just(MissingPolicy::TreatAsFalse), Just(MissingPolicy::TreatAsTrue)];
    let numeric =
        (prop_oneof![Just("x"), Just("y")], ops, -3.0..8.0f64, missing.clone()).prop_map(|(c, op, v, missing)| {
            ThresholdClause {
                covariate: c.into(),
                op,
                threshold: Some((v * 4.0).round() / 4.0),
                categories: None,
                missing,
            }
        });
    let categorical = (
        prop_oneof![Just(Comparator::In), Just(Comparator::NotIn)],
        proptest::sample::subsequence(vec!["a", "b", "c"], 1..=3),
        missing,
    )
        .prop_map(|(op, cats, missing)| ThresholdClause {
            covariate: "z".into(),
            op,
            threshold: None,
            categories: Some(cats.into_iter().map(String::from).collect()),
            missing,
        });
    prop_oneof![numeric, categorical]
}

fn random_rule() -> impl Strategy<Value = RandomRule> {
    let value = |lo: f64, hi: f64| proptest::option::weighted(0.85, lo..hi);
    (
        proptest::collection::vec(clause(), 1..5),
        clause(),
        (
            value(-3.0, 3.0),
            value(0.0, 10.0),
            proptest::option::weighted(0.85, 0..3u8),
        ),
        0..24u32,
    )
        .prop_map(|(clauses, extra, (x, y, z), t)| RandomRule {
            clauses,
            extra,
            state: vec![x, y, z.map(f64::from)],
            t,
        })
}

fn any_of(clauses: &[ThresholdClause]) -> StrategyDef {
    StrategyDef {
        name: "random".into(),
        kind: StrategyKind::ContinueIfAny {
            components: clauses
                .iter()
                .enumerate()
                .map(|(i, c)| Component {
                    name: format!("c{i}"),
                    rule: Rule::Clause(c.clone()),
                })
                .collect(),
        },
    }
}

/// Rule strategies are pure, and adding a clause to a continue-if-any rule
/// never turns continue into stop.
pub fn strategy_purity_and_monotonicity(cases: u32) -> Result<(), String> {
    let schema = DgpSpec::bundled("continuous").unwrap().schema();
    run(cases, random_rule(), |r| {
        let base = any_of(&r.clauses)
            .compile(&schema)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let first = base
            .decide(r.t, &r.state, Behavior::None)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let second = any_of(&r.clauses)
            .compile(&schema)
            .and_then(|g| g.decide(r.t, &r.state, Behavior::None))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&first, &second);
        let mut more = r.clauses.clone();
        more.push(r.extra.clone());
        let wider = any_of(&more)
            .compile(&schema)
            .and_then(|g| g.action(r.t, &r.state, Behavior::None))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(!first.action || wider, "clause turned continue into stop");
        Ok(())
    })
}

/// Simulation through [`Simulator`] matches [`simulate_cohort`] subject by subject.
pub fn simulator_entry_points_agree(cases: u32) -> Result<(), String> {
    run(cases, fixture(), |f| {
        let (models, sims) = simulate(&f, None, false)?;
        let g = f.strategy(models.horizon);
        let direct = Simulator::new(&models, &g)
            .and_then(|s| s.run(f.n, f.seed, false))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(sims, direct);
        Ok(())
    })
}
