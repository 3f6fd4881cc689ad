//! Browser demo over the bundled discrete process. Each exported function
//! takes plain numbers or text and returns JSON for the page to draw.

use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

use stopeval::diagnostics::{ess_ratio, positivity_report, EssSummary, PositivityOptions};
use stopeval::strategy::StrategyDef;
use stopeval::synth::{exact_psi, generate, DgpSpec, SynthError};

/// Largest cohort the coverage panel will generate.
pub const MAX_SUBJECTS: usize = 50_000;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] stopeval::diagnostics::DiagnosticsError),
    #[error("weights: {0}")]
    Weights(String),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Stop epoch, or `None` for the natural course.
    pub stop_epoch: Option<u32>,
    pub psi: f64,
    pub in_treatment: f64,
    pub post_stop: f64,
    pub expected_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticCurve {
    pub horizon: u32,
    pub natural_course: CurvePoint,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoveragePoint {
    pub epoch: u32,
    pub compatible: usize,
    pub matched: usize,
    pub rho: Option<f64>,
}

fn process(in_treatment: f64, post_stop: f64) -> Result<DgpSpec, DemoError> {
    if !in_treatment.is_finite() || !post_stop.is_finite() {
        return Err(DemoError::Input("hazard intercepts must be finite".into()));
    }
    let mut d = DgpSpec::bundled("discrete")?;
    d.in_treatment_hazard.insert("intercept".into(), in_treatment);
    d.post_stop_hazard.insert("intercept".into(), post_stop);
    Ok(d)
}

/// Exact mortality of every static stop epoch and of the natural course,
/// with the two hazard intercepts replaced.
pub fn static_curve(in_treatment: f64, post_stop: f64) -> Result<StaticCurve, DemoError> {
    let d = process(in_treatment, post_stop)?;
    let point = |g: &StrategyDef, stop_epoch| -> Result<CurvePoint, DemoError> {
        let r = exact_psi(&d, g)?;
        Ok(CurvePoint {
            stop_epoch,
            psi: r.psi,
            in_treatment: r.in_treatment,
            post_stop: r.post_stop,
            expected_tau: r.expected_tau,
        })
    };
    let points = (0..d.horizon)
        .map(|k| point(&StrategyDef::static_stop(k), Some(k)))
        .collect::<Result<_, _>>()?;
    Ok(StaticCurve {
        horizon: d.horizon,
        natural_course: point(&StrategyDef::natural_course(), None)?,
        points,
    })
}

/// ESS summary of weights separated by commas, spaces or newlines.
pub fn ess_summary(text: &str) -> Result<EssSummary, DemoError> {
    let weights = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| DemoError::Input(format!("not a number: {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ess_ratio(&weights).map_err(|e| DemoError::Weights(e.to_string()))
}

/// Coverage of static(k) in a freshly generated cohort.
pub fn coverage_curve(n: usize, seed: u64, stop_epoch: u32) -> Result<Vec<CoveragePoint>, DemoError> {
    if n == 0 || n > MAX_SUBJECTS {
        return Err(DemoError::Input(format!("cohort size must be in 1..={MAX_SUBJECTS}")));
    }
    let d = DgpSpec::bundled("discrete")?;
    if stop_epoch >= d.horizon {
        return Err(DemoError::Input(format!("stop epoch must be below {}", d.horizon)));
    }
    let cohort = generate(&d, n, seed)?;
    let report = positivity_report(
        &cohort,
        &StrategyDef::static_stop(stop_epoch),
        None,
        &PositivityOptions::default(),
    )?;
    Ok(report
        .epochs
        .iter()
        .map(|e| CoveragePoint {
            epoch: e.epoch,
            compatible: e.all.compatible,
            matched: e.all.matched,
            rho: e.all.rho,
        })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = staticCurve)]
pub fn static_curve_js(in_treatment: f64, post_stop: f64) -> Result<String, JsError> {
    to_js(static_curve(in_treatment, post_stop))
}

#[wasm_bindgen(js_name = essSummary)]
pub fn ess_summary_js(text: &str) -> Result<String, JsError> {
    to_js(ess_summary(text))
}

#[wasm_bindgen(js_name = coverageCurve)]
pub fn coverage_curve_js(n: u32, seed: u32, stop_epoch: u32) -> Result<String, JsError> {
    to_js(coverage_curve(n as usize, u64::from(seed), stop_epoch))
}
