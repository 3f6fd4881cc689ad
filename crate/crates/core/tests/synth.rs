use stopeval::engine::Simulator;
use stopeval::models::{fit_all, ModelOptions};
use stopeval::strategy::StrategyDef;
use stopeval::synth::{exact_psi, generate, DgpSpec};

fn discrete() -> DgpSpec {
    DgpSpec::bundled("discrete").unwrap()
}

#[test]
fn generated_event_rate_matches_enumeration() {
    let d = discrete();
    let n = 50_000;
    let cohort = generate(&d, n, 2024).unwrap();
    let events = cohort.trajectories.iter().filter(|t| t.event_epoch().is_some()).count() as f64;
    let rate = events / n as f64;
    let exact = exact_psi(&d, &StrategyDef::natural_course()).unwrap();
    let se = (exact.psi * (1.0 - exact.psi) / n as f64).sqrt();
    assert!((rate - exact.psi).abs() < 3.0 * se, "{rate} vs {}", exact.psi);

    let tau: f64 = cohort
        .trajectories
        .iter()
        .map(|t| f64::from(t.tau(d.horizon)))
        .sum::<f64>()
        / n as f64;
    assert!(
        (tau - exact.expected_tau).abs() < 0.05,
        "{tau} vs {}",
        exact.expected_tau
    );
}

#[test]
fn simulator_with_true_models_matches_enumeration() {
    let d = discrete();
    let models = d.true_models().unwrap();
    let n = 40_000;
    for g in [
        StrategyDef::static_stop(2),
        StrategyDef::static_stop(6),
        StrategyDef::natural_course(),
    ] {
        let est = Simulator::new(&models, &g).unwrap().estimate(n, 99).unwrap();
        let exact = exact_psi(&d, &g).unwrap();
        let se = (exact.psi * (1.0 - exact.psi) / n as f64).sqrt();
        assert!(
            (est.psi - exact.psi).abs() < 3.5 * se,
            "{}: {} vs {}",
            g.name,
            est.psi,
            exact.psi
        );
        assert!((est.in_treatment + est.post_stop - est.psi).abs() < 1e-15);
    }
}

#[test]
fn enumeration_does_not_depend_on_category_listing() {
    let d = discrete();
    let mut swapped = d.clone();
    // relabel sex so that M is the reference level
    let sex = &mut swapped.baseline[0];
    sex.categories = Some(vec!["M".into(), "F".into()]);
    sex.probabilities = Some(vec![0.5, 0.5]);
    let shift = |coefs: &mut stopeval::synth::Coefficients| {
        if let Some(b) = coefs.remove("sex=M") {
            *coefs.entry("intercept".into()).or_default() += b;
            coefs.insert("sex=F".into(), -b);
        }
    };
    shift(&mut swapped.in_treatment_hazard);
    shift(&mut swapped.post_stop_hazard);
    shift(&mut swapped.policy);
    for c in &mut swapped.covariates {
        for m in [&mut c.initial, &mut c.transition] {
            if let stopeval::synth::Mechanism::PerCategory(blocks) = m {
                blocks.values_mut().for_each(shift);
            }
        }
    }
    for g in [StrategyDef::static_stop(3), StrategyDef::natural_course()] {
        let a = exact_psi(&d, &g).unwrap();
        let b = exact_psi(&swapped, &g).unwrap();
        assert!((a.psi - b.psi).abs() < 1e-12);
        assert!((a.expected_tau - b.expected_tau).abs() < 1e-12);
    }
}

#[test]
fn fitted_hazards_recover_generating_coefficients() {
    let d = discrete();
    let cohort = generate(&d, 60_000, 7).unwrap();
    let models = fit_all(&cohort, &ModelOptions::default()).unwrap();
    let entry = &models.in_treatment_hazard;
    let beta = &entry.glm.coefficients;
    let se = entry.glm.standard_errors.as_ref().expect("standard errors");
    let truth = |name: &str| d.in_treatment_hazard.get(name).copied().unwrap_or(0.0);
    let check = |i: usize, name: &str, value: f64| {
        let z = (beta[i] - value) / se[i];
        assert!(z.abs() < 3.5, "{name}: {} vs {value} (z = {z})", beta[i]);
    };
    check(0, "intercept", truth("intercept"));
    for (i, name) in entry.features.iter().enumerate() {
        check(i + 1, name, truth(name));
    }
}

#[test]
fn deterministic_policy_is_flagged_as_separated() {
    let mut d = discrete();
    d.policy_rule = Some(StrategyDef::static_stop(6));
    let cohort = generate(&d, 3_000, 3).unwrap();
    assert!(cohort.trajectories.iter().all(|t| t.tau(d.horizon) <= 6));
    let models = fit_all(&cohort, &ModelOptions::default()).unwrap();
    assert!(
        models.warnings.iter().any(|w| w.contains("near-separable")),
        "{:?}",
        models.warnings
    );
}

#[test]
fn natural_course_under_a_policy_rule_is_that_rule() {
    let mut d = discrete();
    let g = StrategyDef::static_stop(3);
    d.policy_rule = Some(g.clone());
    let natural = exact_psi(&d, &StrategyDef::natural_course()).unwrap();
    let direct = exact_psi(&d, &g).unwrap();
    assert!((natural.psi - direct.psi).abs() < 1e-14);
    assert!((natural.expected_tau - direct.expected_tau).abs() < 1e-14);
}
