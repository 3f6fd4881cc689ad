//! Exact strategy values by enumerating every covariate path of a discrete
//! process. Post-stop survival has no branching, so it is summed in closed form.

use serde::{Deserialize, Serialize};

use super::{DgpSpec, Mechanisms, SynthError};
use crate::glm::FittedGlm;
use crate::models::{FeatureKind, SubjectHistory};
use crate::strategy::{Behavior, CompiledStrategy, StrategyDef};

/// Upper bound on visited nodes before enumeration gives up.
pub const MAX_STATES: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    pub psi: f64,
    pub in_treatment: f64,
    pub post_stop: f64,
    /// Expected stop epoch under the usual convention.
    pub expected_tau: f64,
    pub states: u64,
}

type Weighted = (f64, Vec<Option<f64>>, Vec<Option<f64>>);

fn glm_err(name: &str) -> impl Fn(crate::glm::GlmError) -> SynthError + '_ {
    move |source| SynthError::Glm {
        mechanism: name.to_string(),
        source,
    }
}

/// Every epoch-0 state with its probability.
pub(crate) fn initial_states(spec: &DgpSpec, m: &Mechanisms) -> Result<Vec<Weighted>, SynthError> {
    if !spec.is_discrete() {
        return Err(SynthError::NotDiscrete("every variable must be categorical".into()));
    }
    let mut baselines: Vec<(f64, Vec<Option<f64>>)> = vec![(1.0, Vec::new())];
    for b in &spec.baseline {
        let probs = b.probabilities.as_deref().unwrap_or(&[]);
        baselines = baselines
            .into_iter()
            .flat_map(|(w, v)| {
                probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(move |(k, &p)| {
                    let mut v = v.clone();
                    v.push(Some(k as f64));
                    (w * p, v)
                })
            })
            .collect();
    }
    let n_c = m.layout.n_covariates();
    let mut out = Vec::new();
    let mut x = Vec::new();
    for (w, baseline) in baselines {
        let mut partial: Vec<(f64, Vec<Option<f64>>)> = vec![(w, vec![None; n_c])];
        for (p, &j) in m.layout.ordering.iter().enumerate() {
            let mut next = Vec::new();
            for (w, current) in partial {
                m.layout.encode_initial(&baseline, &current, p, &mut x);
                let probs = m.initial[p]
                    .predict_probabilities(&x)
                    .map_err(glm_err(&spec.covariates[j].name))?;
                for (k, &pk) in probs.iter().enumerate() {
                    if pk > 0.0 {
                        let mut c = current.clone();
                        c[j] = Some(k as f64);
                        next.push((w * pk, c));
                    }
                }
            }
            partial = next;
        }
        out.extend(partial.into_iter().map(|(w, c)| (w, baseline.clone(), c)));
    }
    Ok(out)
}

enum Rule<'a> {
    Strategy(&'a CompiledStrategy),
    Policy(&'a FittedGlm),
}

struct Walker<'a> {
    m: &'a Mechanisms,
    rule: Rule<'a>,
    horizon: u32,
    x: Vec<f64>,
    acc: ExactResult,
}

impl Walker<'_> {
    fn tick(&mut self) -> Result<(), SynthError> {
        self.acc.states += 1;
        if self.acc.states > MAX_STATES {
            return Err(SynthError::Overflow { limit: MAX_STATES });
        }
        Ok(())
    }

    fn hazard(
        &mut self,
        glm: &FittedGlm,
        kind: FeatureKind,
        h: &SubjectHistory<'_>,
        t: u32,
    ) -> Result<f64, SynthError> {
        h.features(kind, t, &[], &mut self.x)?;
        glm.predict_mean(&self.x).map_err(glm_err("hazard"))
    }

    /// Probability of continuing after the state at `t` has been recorded.
    fn continue_probability(
        &mut self,
        h: &SubjectHistory<'_>,
        t: u32,
        state: &[Option<f64>],
    ) -> Result<f64, SynthError> {
        match self.rule {
            Rule::Strategy(g) => Ok(f64::from(u8::from(g.action(t, state, Behavior::None)?))),
            Rule::Policy(glm) => {
                h.features(FeatureKind::Treatment, t, &[], &mut self.x)?;
                glm.predict_mean(&self.x).map_err(glm_err("policy"))
            }
        }
    }

    /// Mass `w` has just recorded the state at epoch `t` while treated.
    fn decided(&mut self, h: SubjectHistory<'_>, t: u32, state: &[Option<f64>], w: f64) -> Result<(), SynthError> {
        self.tick()?;
        let pc = self.continue_probability(&h, t, state)?;
        if pc < 1.0 {
            let mut stopped = h.clone();
            stopped.stop_now()?;
            self.stopped(&stopped, t, w * (1.0 - pc))?;
        }
        if pc > 0.0 {
            self.continued(h, t, w * pc)?;
        }
        Ok(())
    }

    fn stopped(&mut self, h: &SubjectHistory<'_>, tau: u32, w: f64) -> Result<(), SynthError> {
        self.acc.expected_tau += w * f64::from(tau);
        let mut survival = 1.0;
        for u in tau + 1..=self.horizon {
            let q = self.hazard(&self.m.post_stop, FeatureKind::PostStop, h, u)?;
            self.acc.post_stop += w * survival * q;
            survival *= 1.0 - q;
        }
        Ok(())
    }

    fn continued(&mut self, h: SubjectHistory<'_>, t: u32, w: f64) -> Result<(), SynthError> {
        let u = t + 1;
        let q = self.hazard(&self.m.in_treatment, FeatureKind::InTreatment, &h, u)?;
        self.acc.in_treatment += w * q;
        // death at u and survival to the horizon both give tau = t
        if u == self.horizon {
            self.acc.expected_tau += w * f64::from(t);
            return Ok(());
        }
        self.acc.expected_tau += w * q * f64::from(t);
        let n_c = self.m.layout.n_covariates();
        self.branch(h, u, vec![None; n_c], 0, w * (1.0 - q))
    }

    fn branch(
        &mut self,
        h: SubjectHistory<'_>,
        t: u32,
        current: Vec<Option<f64>>,
        p: usize,
        w: f64,
    ) -> Result<(), SynthError> {
        let m = self.m;
        if p == m.layout.ordering.len() {
            let mut next = h;
            next.push(&current)?;
            return self.decided(next, t, &current, w);
        }
        h.features(FeatureKind::Covariate(p), t, &current, &mut self.x)?;
        let probs = m.transition[p]
            .predict_probabilities(&self.x)
            .map_err(glm_err("covariate"))?;
        let j = m.layout.ordering[p];
        for (k, &pk) in probs.iter().enumerate() {
            if pk > 0.0 {
                let mut c = current.clone();
                c[j] = Some(k as f64);
                self.branch(h.clone(), t, c, p + 1, w * pk)?;
            }
        }
        Ok(())
    }
}

/// Exact value of `strategy` under the process. The natural course follows
/// the policy (logistic or rule).
pub fn exact_psi(spec: &DgpSpec, strategy: &StrategyDef) -> Result<ExactResult, SynthError> {
    let m = spec.mechanisms()?;
    let compiled = strategy.compile(&m.schema)?;
    let rule = if compiled.is_natural_course() {
        match &m.policy_rule {
            Some(r) => Rule::Strategy(r),
            None => Rule::Policy(&m.policy),
        }
    } else {
        Rule::Strategy(&compiled)
    };
    let starts = initial_states(spec, &m)?;
    let mut walker = Walker {
        m: &m,
        rule,
        horizon: spec.horizon,
        x: Vec::new(),
        acc: ExactResult {
            psi: 0.0,
            in_treatment: 0.0,
            post_stop: 0.0,
            expected_tau: 0.0,
            states: 0,
        },
    };
    for (w, baseline, covariates) in starts {
        let mut h = SubjectHistory::new(&m.layout, &baseline);
        h.push(&covariates)?;
        walker.decided(h, 0, &covariates, w)?;
    }
    let mut acc = walker.acc;
    acc.psi = acc.in_treatment + acc.post_stop;
    Ok(acc)
}
