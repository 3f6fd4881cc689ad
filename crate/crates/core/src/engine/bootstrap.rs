//! Nonparametric bootstrap over subjects, paired with the natural course.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{with_workers, EngineError, Estimate, Simulator};
use crate::cohort::Cohort;
use crate::models::{FittedModels, ModelOptions, TrainingData};
use crate::rng::{derive_seed, streams, substream};
use crate::stats::{quantile_sorted, sorted, LosStats, EPOCH_DAYS};
use crate::strategy::{CompiledStrategy, StrategyDef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationOptions {
    /// Synthetic subjects per simulation.
    pub n_simulated: usize,
    pub replicates: usize,
    pub seed: u64,
    pub confidence: f64,
    /// Largest tolerated share of replicates whose refit fails.
    pub max_dropped_fraction: f64,
    pub workers: Option<usize>,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            n_simulated: 10_000,
            replicates: 100,
            seed: 0,
            confidence: 0.95,
            max_dropped_fraction: 0.1,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalitySplit {
    pub in_treatment: f64,
    pub post_stop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    /// Strategy minus natural course.
    pub point: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: String,
    pub psi: f64,
    pub psi_ci: [f64; 2],
    pub difference_to_natural_course: Difference,
    pub mortality_split: MortalitySplit,
    pub los_days: LosStats,
    pub los_mean_ci: [f64; 2],
    pub mean_tau_epochs: f64,
    pub n_subjects: usize,
    pub n_simulated: usize,
    pub horizon: u32,
    pub seed: u64,
    pub bootstrap_replicates: usize,
    pub dropped_replicates: usize,
    pub confidence: f64,
    pub epoch_days: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Seed of the simulation run `r`; run 0 is the point estimate, run `b + 1`
/// belongs to replicate `b`. Every strategy in a run shares it.
fn run_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, streams::SIMULATION, r as u64)
}

/// Per-subject multiplicities of one bootstrap resample.
fn resample_weights(n: usize, master: u64, b: usize) -> Vec<f64> {
    let mut rng = substream(master, streams::FIT_BOOTSTRAP, b as u64);
    let mut w = vec![0.0; n];
    for _ in 0..n {
        w[rng.random_range(0..n)] += 1.0;
    }
    w
}

/// Natural course first, then the strategies.
fn run_all(
    models: &FittedModels,
    compiled: &[CompiledStrategy],
    n: usize,
    seed: u64,
) -> Result<Vec<Estimate>, EngineError> {
    compiled
        .iter()
        .map(|g| Simulator::with_compiled(models, g.clone()).estimate(n, seed))
        .collect()
}

fn interval(values: &[f64], confidence: f64) -> [f64; 2] {
    let s = sorted(values);
    let alpha = (1.0 - confidence) / 2.0;
    [quantile_sorted(&s, alpha), quantile_sorted(&s, 1.0 - alpha)]
}

/// Evaluate strategies with percentile bootstrap intervals. Each replicate
/// resamples subjects, refits every model and simulates all strategies and
/// the natural course with common random numbers.
pub fn bootstrap_evaluate(
    cohort: &Cohort,
    strategies: &[StrategyDef],
    model_options: &ModelOptions,
    options: &EvaluationOptions,
) -> Result<Vec<EvaluationReport>, EngineError> {
    if options.replicates < 2 {
        return Err(EngineError::TooFewReplicates(options.replicates));
    }
    if options.n_simulated == 0 {
        return Err(EngineError::NoSubjects);
    }
    let data = TrainingData::build(cohort, model_options)?;
    let full = data.fit(None)?;
    let mut compiled = vec![StrategyDef::natural_course().compile(&cohort.schema)?];
    let mut slot = Vec::with_capacity(strategies.len());
    for g in strategies {
        let c = g.compile(&cohort.schema)?;
        if c.is_natural_course() {
            slot.push(0);
        } else {
            slot.push(compiled.len());
            compiled.push(c);
        }
    }
    let n = options.n_simulated;

    let (point, replicates) = with_workers(options.workers, || {
        let point = run_all(&full, &compiled, n, run_seed(options.seed, 0));
        let replicates: Vec<Result<Vec<Estimate>, String>> = (0..options.replicates)
            .into_par_iter()
            .map(|b| {
                let w = resample_weights(data.n_subjects(), options.seed, b);
                let models = data.fit(Some(&w)).map_err(|e| e.to_string())?;
                run_all(&models, &compiled, n, run_seed(options.seed, b + 1)).map_err(|e| e.to_string())
            })
            .collect();
        (point, replicates)
    })?;
    let point = point?;

    let failures: Vec<&String> = replicates.iter().filter_map(|r| r.as_ref().err()).collect();
    let dropped = failures.len();
    if dropped as f64 > options.max_dropped_fraction * options.replicates as f64 {
        return Err(EngineError::TooManyDropped {
            dropped,
            total: options.replicates,
            first: failures[0].clone(),
        });
    }
    let kept: Vec<&Vec<Estimate>> = replicates.iter().filter_map(|r| r.as_ref().ok()).collect();

    let nc = &point[0];
    let mut reports = Vec::with_capacity(strategies.len());
    for (def, &j) in strategies.iter().zip(&slot) {
        let est = &point[j];
        let psi: Vec<f64> = kept.iter().map(|r| r[j].psi).collect();
        let los: Vec<f64> = kept.iter().map(|r| r[j].los_days.mean).collect();
        let diff: Vec<f64> = kept.iter().map(|r| r[j].psi - r[0].psi).collect();
        let psi_ci = interval(&psi, options.confidence);
        let mut warnings = full.warnings.clone();
        if dropped > 0 {
            warnings.push(format!("{dropped} bootstrap replicates dropped after failed refits"));
        }
        if est.psi < psi_ci[0] || est.psi > psi_ci[1] {
            warnings.push(format!(
                "point estimate {} lies outside its percentile interval [{}, {}]",
                est.psi, psi_ci[0], psi_ci[1]
            ));
        }
        reports.push(EvaluationReport {
            strategy: def.name.clone(),
            psi: est.psi,
            psi_ci,
            difference_to_natural_course: Difference {
                point: est.psi - nc.psi,
                ci: interval(&diff, options.confidence),
            },
            mortality_split: MortalitySplit {
                in_treatment: est.in_treatment,
                post_stop: est.post_stop,
            },
            los_days: est.los_days,
            los_mean_ci: interval(&los, options.confidence),
            mean_tau_epochs: est.mean_tau_epochs,
            n_subjects: cohort.len(),
            n_simulated: n,
            horizon: cohort.horizon(),
            seed: options.seed,
            bootstrap_replicates: options.replicates,
            dropped_replicates: dropped,
            confidence: options.confidence,
            epoch_days: EPOCH_DAYS,
            warnings,
        });
    }
    Ok(reports)
}
