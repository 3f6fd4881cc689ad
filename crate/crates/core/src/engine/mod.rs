//! Monte Carlo forward simulation under a strategy and the resulting estimators.
//!
//! Each synthetic subject draws its epoch-0 state jointly from the baseline
//! pool, then alternates: outcome from the in-treatment hazard (while treated)
//! or the post-stop hazard, covariates in the declared order, and the
//! strategy's decision. Every subject has its own random substream, so output
//! does not depend on the number of workers.

mod bootstrap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::GlmError;
use crate::models::{FeatureKind, FittedModels, ModelError, SubjectHistory};
use crate::rng::{streams, substream};
use crate::stats::{LosStats, EPOCH_DAYS};
use crate::strategy::{Behavior, CompiledStrategy, StrategyDef, StrategyError};

pub use bootstrap::{bootstrap_evaluate, Difference, EvaluationOptions, EvaluationReport, MortalitySplit};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("{model} at epoch {t}: {source}")]
    Sample {
        model: String,
        t: u32,
        #[source]
        source: GlmError,
    },
    #[error("number of simulated subjects must be at least 1")]
    NoSubjects,
    #[error("cannot estimate from an empty simulation")]
    Empty,
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("{dropped} of {total} bootstrap replicates failed to fit (limit 10%); first failure: {first}")]
    TooManyDropped {
        dropped: usize,
        total: usize,
        first: String,
    },
    #[error("cannot build worker pool: {0}")]
    Workers(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationOptions {
    pub n: usize,
    pub seed: u64,
    /// Keep every subject's covariate path (needed for calibration).
    pub retain_paths: bool,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            n: 10_000,
            seed: 0,
            retain_paths: false,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTrajectory {
    pub subject: u64,
    /// Event by the horizon.
    pub outcome: bool,
    pub event_epoch: Option<u32>,
    /// Stop epoch: the stop decision, `t_d - 1` after an in-treatment event,
    /// `T - 1` otherwise.
    pub tau: u32,
    /// Whether treatment was stopped by a decision.
    pub stopped: bool,
    pub died_in_treatment: bool,
    /// Covariates of every in-treatment epoch `0..=last`, when retained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<Vec<Option<f64>>>>,
}

/// Run `f` inside a pool of `workers` threads (or the global pool).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, EngineError> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| EngineError::Workers(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// A model suite paired with a compiled strategy, ready to simulate.
pub struct Simulator<'m> {
    models: &'m FittedModels,
    strategy: CompiledStrategy,
    cumulative: Vec<f64>,
    encoded: Vec<Vec<f64>>,
}

struct Scratch {
    x: Vec<f64>,
    probs: Vec<f64>,
    current: Vec<Option<f64>>,
}

impl<'m> Simulator<'m> {
    pub fn new(models: &'m FittedModels, strategy: &StrategyDef) -> Result<Self, EngineError> {
        models.check()?;
        let strategy = strategy.compile(&models.schema)?;
        Ok(Self::with_compiled(models, strategy))
    }

    pub fn with_compiled(models: &'m FittedModels, strategy: CompiledStrategy) -> Self {
        let mut total = 0.0;
        let cumulative = models
            .baseline_pool
            .iter()
            .map(|e| {
                total += e.weight.max(0.0);
                total
            })
            .collect();
        let encoded = models
            .baseline_pool
            .iter()
            .map(|e| {
                let mut out = Vec::new();
                models.layout.encode_baseline(&e.baseline, &mut out);
                out
            })
            .collect();
        Self {
            models,
            strategy,
            cumulative,
            encoded,
        }
    }

    fn draw_pool<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty pool");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    fn sample_err(model: &str, t: u32) -> impl FnOnce(GlmError) -> EngineError + '_ {
        move |source| EngineError::Sample {
            model: model.to_string(),
            t,
            source,
        }
    }

    fn decide<R: Rng>(
        &self,
        history: &SubjectHistory<'_>,
        t: u32,
        state: &[Option<f64>],
        rng: &mut R,
        scratch: &mut Vec<f64>,
    ) -> Result<bool, EngineError> {
        if self.strategy.is_natural_course() {
            history.features(FeatureKind::Treatment, t, &[], scratch)?;
            let p = self
                .models
                .treatment_model
                .glm
                .predict_mean(scratch)
                .map_err(Self::sample_err("treatment", t))?;
            let continue_now = rng.random::<f64>() < p;
            Ok(self.strategy.action(t, state, Behavior::Observed(continue_now))?)
        } else {
            Ok(self.strategy.action(t, state, Behavior::None)?)
        }
    }

    fn subject(
        &self,
        i: u64,
        seed: u64,
        retain: bool,
        scratch: &mut Scratch,
    ) -> Result<SimulatedTrajectory, EngineError> {
        let models = self.models;
        let horizon = models.horizon;
        let mut rng = substream(seed, streams::SIMULATION, i);
        let k = self.draw_pool(&mut rng);
        let entry = &models.baseline_pool[k];
        let mut history = SubjectHistory::from_encoded(&models.layout, self.encoded[k].clone());
        let mut path = retain.then(Vec::new);

        history.push(&entry.covariates)?;
        if let Some(p) = path.as_mut() {
            p.push(entry.covariates.clone());
        }
        let mut treated = self.decide(&history, 0, &entry.covariates, &mut rng, &mut scratch.x)?;
        if !treated {
            history.stop_now()?;
        }
        let mut event = None;
        let mut died_in_treatment = false;
        for t in 1..=horizon {
            let (kind, model) = if treated {
                (FeatureKind::InTreatment, &models.in_treatment_hazard)
            } else {
                (FeatureKind::PostStop, &models.post_stop_hazard)
            };
            history.features(kind, t, &[], &mut scratch.x)?;
            let p = model
                .glm
                .predict_mean(&scratch.x)
                .map_err(Self::sample_err(&model.name, t))?;
            if rng.random::<f64>() < p {
                event = Some(t);
                died_in_treatment = treated;
                break;
            }
            if t == horizon || !treated {
                continue;
            }
            scratch.current.iter_mut().for_each(|v| *v = None);
            for (p, &j) in models.layout.ordering.iter().enumerate() {
                history.features(FeatureKind::Covariate(p), t, &scratch.current, &mut scratch.x)?;
                let m = &models.covariate_models[p];
                let v = m
                    .glm
                    .sample_with(&scratch.x, &mut rng, &mut scratch.probs)
                    .map_err(Self::sample_err(&m.name, t))?;
                scratch.current[j] = Some(v);
            }
            history.push(&scratch.current)?;
            if let Some(p) = path.as_mut() {
                p.push(scratch.current.clone());
            }
            treated = self.decide(&history, t, &scratch.current, &mut rng, &mut scratch.x)?;
            if !treated {
                history.stop_now()?;
            }
        }
        let stopped = history.stop_epoch().is_some();
        let tau = match (history.stop_epoch(), event) {
            (Some(s), _) => s,
            (None, Some(d)) => d - 1,
            (None, None) => horizon - 1,
        };
        Ok(SimulatedTrajectory {
            subject: i,
            outcome: event.is_some(),
            event_epoch: event,
            tau,
            stopped,
            died_in_treatment,
            path,
        })
    }

    /// Simulate subjects `0..n` with per-subject substreams of `seed`.
    pub fn run(&self, n: usize, seed: u64, retain_paths: bool) -> Result<Vec<SimulatedTrajectory>, EngineError> {
        if n == 0 {
            return Err(EngineError::NoSubjects);
        }
        let width = self.models.layout.n_covariates();
        (0..n as u64)
            .into_par_iter()
            .map_init(
                || Scratch {
                    x: Vec::new(),
                    probs: Vec::new(),
                    current: vec![None; width],
                },
                |scratch, i| self.subject(i, seed, retain_paths, scratch),
            )
            .collect()
    }

    /// Simulate and reduce to counts without keeping trajectories.
    pub fn estimate(&self, n: usize, seed: u64) -> Result<Estimate, EngineError> {
        Estimate::from_sims(&self.run(n, seed, false)?)
    }
}

/// Simulate `opts.n` subjects under `strategy`.
pub fn simulate_cohort(
    models: &FittedModels,
    strategy: &StrategyDef,
    opts: &SimulationOptions,
) -> Result<Vec<SimulatedTrajectory>, EngineError> {
    let sim = Simulator::new(models, strategy)?;
    with_workers(opts.workers, || sim.run(opts.n, opts.seed, opts.retain_paths))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub n: usize,
    /// Mean final outcome; equals `in_treatment + post_stop` exactly.
    pub psi: f64,
    pub in_treatment: f64,
    pub post_stop: f64,
    pub los_days: LosStats,
    pub mean_tau_epochs: f64,
    pub epoch_days: f64,
}

impl Estimate {
    pub fn from_sims(sims: &[SimulatedTrajectory]) -> Result<Self, EngineError> {
        if sims.is_empty() {
            return Err(EngineError::Empty);
        }
        let n = sims.len() as f64;
        let in_count = sims.iter().filter(|s| s.died_in_treatment).count() as f64;
        let post_count = sims.iter().filter(|s| s.outcome && !s.died_in_treatment).count() as f64;
        let in_treatment = in_count / n;
        let post_stop = post_count / n;
        let tau_sum: u64 = sims.iter().map(|s| u64::from(s.tau)).sum();
        Ok(Self {
            n: sims.len(),
            psi: in_treatment + post_stop,
            in_treatment,
            post_stop,
            los_days: LosStats::from_epochs(sims.iter().map(|s| s.tau)),
            mean_tau_epochs: tau_sum as f64 / n,
            epoch_days: EPOCH_DAYS,
        })
    }
}

/// Point estimates from simulated trajectories.
pub fn estimate(sims: &[SimulatedTrajectory]) -> Result<Estimate, EngineError> {
    Estimate::from_sims(sims)
}

#[cfg(test)]
pub(crate) mod testing {
    use crate::cohort::{Aggregation, BaselineSpec, CovariateSpec, Distribution, Schema};
    use crate::glm::FittedGlm;
    use crate::models::{FeatureKind, FeatureLayout, FittedModels, PoolEntry};

    pub fn schema(horizon: u32) -> Schema {
        Schema {
            horizon,
            baseline: vec![BaselineSpec {
                name: "sex".into(),
                categories: Some(vec!["F".into(), "M".into()]),
            }],
            covariates: vec![CovariateSpec {
                name: "x".into(),
                family: Distribution::Normal,
                aggregation: Aggregation::Mean,
                bounds: None,
                categories: None,
            }],
        }
    }

    /// One normal covariate, hazards with constant logits `a` (in treatment)
    /// and `b` (after stop), treatment model with constant logit `c`.
    pub fn constant_models(horizon: u32, a: f64, b: f64, c: f64) -> FittedModels {
        let schema = schema(horizon);
        let layout = FeatureLayout::new(&schema, None, &[false], &[false], 1, true).unwrap();
        let coef = |kind, intercept: f64| {
            let mut v = vec![0.0; layout.width(kind) + 1];
            v[0] = intercept;
            v
        };
        FittedModels::new(
            schema.clone(),
            layout.clone(),
            vec![FittedGlm::normal(coef(FeatureKind::Covariate(0), 0.0), 1.0)],
            FittedGlm::binomial(coef(FeatureKind::InTreatment, a)),
            FittedGlm::binomial(coef(FeatureKind::PostStop, b)),
            FittedGlm::binomial(coef(FeatureKind::Treatment, c)),
            vec![
                PoolEntry {
                    weight: 1.0,
                    baseline: vec![Some(0.0)],
                    covariates: vec![Some(0.0)],
                },
                PoolEntry {
                    weight: 1.0,
                    baseline: vec![Some(1.0)],
                    covariates: vec![Some(1.0)],
                },
            ],
        )
        .unwrap()
    }
}
