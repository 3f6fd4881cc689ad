//! Acceptance harness: one PASS/FAIL line per criterion.

#[allow(dead_code)]
mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use stopeval::diagnostics::{ess_ratio, positivity_report, smd_over_time, PositivityOptions};
use stopeval::engine::{bootstrap_evaluate, simulate_cohort, EvaluationOptions, SimulationOptions, Simulator};
use stopeval::glm::{fit_glm, logistic, Design, Family, FitOptions};
use stopeval::models::{fit_all, ModelOptions};
use stopeval::rng::substream;
use stopeval::strategy::StrategyDef;
use stopeval::synth::{exact_psi, generate, DgpSpec};

use common::invariants::{self, categorical_rule, CASES};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Outcome, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Simulation with the generating models against exact enumeration.
fn oracle_equivalence() -> Check {
    const N: usize = 200_000;
    let start = Instant::now();
    let spec = DgpSpec::bundled("discrete").map_err(err)?;
    let models = spec.true_models().map_err(err)?;
    let strategies = [
        StrategyDef::static_stop(0),
        StrategyDef::static_stop(2),
        StrategyDef::static_stop(4),
        categorical_rule("x1"),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, g) in strategies.iter().enumerate() {
        let exact = exact_psi(&spec, g).map_err(err)?;
        let est = Simulator::new(&models, g)
            .and_then(|s| s.estimate(N, 7_000 + i as u64))
            .map_err(err)?;
        let band = 3.0 * (exact.psi * (1.0 - exact.psi) / N as f64).sqrt();
        let dpsi = (est.psi - exact.psi).abs();
        let dtau = (est.mean_tau_epochs - exact.expected_tau).abs();
        pass &= dpsi <= band && dtau <= 0.02;
        parts.push(format!("{} |dpsi|={dpsi:.5}<={band:.5} |dtau|={dtau:.4}", g.name));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= Duration::from_secs(60);
    parts.push(format!("{:.1}s", elapsed.as_secs_f64()));
    Ok(verdict(pass, parts.join("; ")))
}

/// Observed event rate inside the bootstrap CI of the natural course.
fn natural_course_self_consistency() -> Check {
    let spec = DgpSpec::bundled("discrete").map_err(err)?;
    let mut inside = 0;
    for seed in 0..20u64 {
        let cohort = generate(&spec, 20_000, 1_000 + seed).map_err(err)?;
        let rate =
            cohort.trajectories.iter().filter(|t| t.event_epoch().is_some()).count() as f64 / cohort.len() as f64;
        let opts = EvaluationOptions {
            n_simulated: 20_000,
            replicates: 50,
            seed: 2_000 + seed,
            ..EvaluationOptions::default()
        };
        let reports = bootstrap_evaluate(
            &cohort,
            &[StrategyDef::natural_course()],
            &ModelOptions::default(),
            &opts,
        )
        .map_err(err)?;
        let ci = reports[0].psi_ci;
        if ci[0] <= rate && rate <= ci[1] {
            inside += 1;
        }
    }
    Ok(verdict(
        inside >= 18,
        format!("{inside}/20 seeds inside the 95% CI (need >= 18)"),
    ))
}

fn random_design(n: usize, p: usize, seed: u64) -> (Design, Vec<Vec<f64>>) {
    let mut rng = substream(seed, "acceptance", 0);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
        .collect();
    (Design::from_rows(p, &rows).unwrap(), rows)
}

fn log_likelihood(beta: &[f64], rows: &[Vec<f64>], y: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(x, &y)| {
            let eta = beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let p = logistic(eta);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum()
}

fn glm_correctness() -> Check {
    let opts = FitOptions {
        ridge_penalty: 0.0,
        ..FitOptions::default()
    };
    let mut rng = substream(11, "acceptance", 1);

    // gaussian against an SVD least-squares solve
    let (x, rows) = random_design(400, 4, 3);
    let truth = [0.3, -1.2, 0.8, 2.0, -0.4];
    let y: Vec<f64> = rows
        .iter()
        .map(|r| truth[0] + r.iter().zip(&truth[1..]).map(|(a, b)| a * b).sum::<f64>() + rng.random::<f64>() - 0.5)
        .collect();
    let fit = fit_glm(Family::Normal, &x, &y, None, &opts).map_err(err)?;
    let a = DMatrix::from_fn(rows.len(), 5, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let ls = a.svd(true, true).solve(&DVector::from_vec(y), 1e-14).map_err(err)?;
    let gauss_gap = fit
        .coefficients
        .iter()
        .zip(ls.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // logistic gradient by central differences at the solution
    let (x, rows) = random_design(600, 3, 5);
    let beta_true = [-0.4, 1.0, -0.7, 0.5];
    let y: Vec<f64> = rows
        .iter()
        .map(|r| {
            let eta = beta_true[0] + r.iter().zip(&beta_true[1..]).map(|(a, b)| a * b).sum::<f64>();
            f64::from(rng.random::<f64>() < logistic(eta))
        })
        .collect();
    let fit = fit_glm(Family::Binomial, &x, &y, None, &opts).map_err(err)?;
    let ll = log_likelihood(&fit.coefficients, &rows, &y);
    let h = 1e-6;
    let mut worst_gradient = 0.0f64;
    for j in 0..fit.coefficients.len() {
        let mut up = fit.coefficients.clone();
        let mut down = fit.coefficients.clone();
        up[j] += h;
        down[j] -= h;
        let g = (log_likelihood(&up, &rows, &y) - log_likelihood(&down, &rows, &y)) / (2.0 * h);
        worst_gradient = worst_gradient.max(g.abs());
    }
    let gradient_bound = 1e-4 * (1.0 + ll.abs());

    // softmax probabilities
    let (x, rows) = random_design(900, 2, 9);
    let y: Vec<f64> = (0..rows.len()).map(|_| f64::from(rng.random_range(0..3u8))).collect();
    let fit = fit_glm(
        Family::Categorical { n_categories: 3 },
        &x,
        &y,
        None,
        &FitOptions::default(),
    )
    .map_err(err)?;
    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let q = [rng.random::<f64>() * 200.0 - 100.0, rng.random::<f64>() * 200.0 - 100.0];
        let p = fit.predict_probabilities(&q).map_err(err)?;
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    for r in &rows {
        let p = fit.predict_probabilities(r).map_err(err)?;
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
    }

    let pass = gauss_gap <= 1e-8 && worst_gradient <= gradient_bound && worst_sum <= 1e-12;
    Ok(verdict(
        pass,
        format!(
            "gaussian max gap {gauss_gap:.2e} (<= 1e-8); logistic max |grad| {worst_gradient:.2e} (<= {gradient_bound:.2e}); softmax max |sum-1| {worst_sum:.1e} (<= 1e-12)"
        ),
    ))
}

/// Natural-course covariate trajectories match the observed ones.
fn calibration() -> Check {
    let spec = DgpSpec::bundled("continuous").map_err(err)?;
    let cohort = generate(&spec, 20_000, 31).map_err(err)?;
    let models = fit_all(&cohort, &ModelOptions::default()).map_err(err)?;
    let opts = SimulationOptions {
        n: 20_000,
        seed: 32,
        retain_paths: true,
        workers: None,
    };
    let sims = simulate_cohort(&models, &StrategyDef::natural_course(), &opts).map_err(err)?;
    let report = smd_over_time(&cohort, &sims).map_err(err)?;
    let max = report.max_abs_smd(20).ok_or("no SMD computed")?;
    Ok(verdict(
        max <= 0.1,
        format!("max |SMD| over epochs 0..20 = {max:.4} (<= 0.1)"),
    ))
}

fn diagnostic_identities() -> Check {
    let spec = DgpSpec::bundled("discrete").map_err(err)?;
    let cohort = generate(&spec, 5_000, 41).map_err(err)?;
    let models = fit_all(&cohort, &ModelOptions::default()).map_err(err)?;
    let opts = PositivityOptions::default();

    let replay = positivity_report(&cohort, &StrategyDef::natural_course(), Some(&models), &opts).map_err(err)?;
    let replay_ok = replay
        .epochs
        .iter()
        .filter(|e| e.all.compatible > 0)
        .all(|e| e.all.rho == Some(1.0));

    let mut ess_gap = 0.0f64;
    let mut splits_ok = true;
    for g in [
        StrategyDef::natural_course(),
        StrategyDef::static_stop(3),
        categorical_rule("x1"),
        categorical_rule("x2"),
    ] {
        let r = positivity_report(&cohort, &g, Some(&models), &opts).map_err(err)?;
        for e in &r.epochs {
            splits_ok &= e.prescribed_continue.matched + e.prescribed_stop.matched == e.all.matched;
            splits_ok &= e.prescribed_continue.compatible + e.prescribed_stop.compatible == e.all.compatible;
            if let Some(w) = &e.weights {
                ess_gap = ess_gap.max((w.ess - w.ess_identity).abs() / w.ess);
            }
        }
    }
    let hand = ess_ratio(&[1.0, 2.0, 3.0]).map_err(err)?;
    let hand_ok = hand.ess == 36.0 / 14.0;
    let pass = replay_ok && ess_gap <= 1e-9 && splits_ok && hand_ok;
    Ok(verdict(
        pass,
        format!(
            "replay rho=1: {replay_ok}; ESS identity rel gap {ess_gap:.1e} (<= 1e-9); split sums: {splits_ok}; ESS(1,2,3)={} == 36/14: {hand_ok}",
            hand.ess
        ),
    ))
}

fn invariant_suite() -> Check {
    let checks: [(&str, fn(u32) -> Result<(), String>); 4] = [
        ("absorbing", invariants::absorbing_processes),
        ("split", invariants::split_additivity),
        ("workers", invariants::worker_determinism),
        ("purity/monotonicity", invariants::strategy_purity_and_monotonicity),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, check) in checks {
        match check(CASES) {
            Ok(()) => parts.push(format!("{name} ok")),
            Err(e) => {
                pass = false;
                parts.push(format!("{name} failed: {e}"));
            }
        }
    }
    Ok(verdict(pass, format!("{} cases each: {}", CASES, parts.join(", "))))
}

/// Static-stop ordering follows whichever hazard is larger.
fn dual_outcome_models() -> Check {
    const N: usize = 100_000;
    let stops = [0u32, 2, 4, 6];
    let mut parts = Vec::new();
    let mut pass = true;
    for (label, in_treatment, post_stop, increasing) in
        [("in>>post", -2.0, -5.0, true), ("post>>in", -5.0, -2.0, false)]
    {
        let mut spec = DgpSpec::bundled("discrete").map_err(err)?;
        spec.in_treatment_hazard.insert("intercept".into(), in_treatment);
        spec.post_stop_hazard.insert("intercept".into(), post_stop);
        let cohort = generate(&spec, 20_000, 51).map_err(err)?;
        let models = fit_all(&cohort, &ModelOptions::default()).map_err(err)?;
        let mut psi = Vec::new();
        for &k in &stops {
            let e = Simulator::new(&models, &StrategyDef::static_stop(k))
                .and_then(|s| s.estimate(N, 52))
                .map_err(err)?;
            psi.push(e.psi);
        }
        let se = |p: f64| (p * (1.0 - p) / N as f64).sqrt();
        let mut min_ratio = f64::INFINITY;
        for w in psi.windows(2) {
            let gap = if increasing { w[1] - w[0] } else { w[0] - w[1] };
            let mc = (se(w[0]).powi(2) + se(w[1]).powi(2)).sqrt();
            min_ratio = min_ratio.min(gap / mc);
        }
        pass &= min_ratio >= 10.0;
        let shown: Vec<String> = psi.iter().map(|p| format!("{p:.4}")).collect();
        parts.push(format!(
            "{label}: psi(k=0,2,4,6)=[{}] min gap/MC-se {min_ratio:.1} (>= 10)",
            shown.join(",")
        ));
    }
    Ok(verdict(pass, parts.join("; ")))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 7] = [
        (1, "oracle equivalence", oracle_equivalence),
        (2, "natural-course self-consistency", natural_course_self_consistency),
        (3, "glm correctness", glm_correctness),
        (4, "calibration", calibration),
        (5, "diagnostic identities", diagnostic_identities),
        (6, "invariant suite", invariant_suite),
        (7, "dual outcome models", dual_outcome_models),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let start = Instant::now();
        let outcome = check().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {n}: {status} {name} [{:.1}s] {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
