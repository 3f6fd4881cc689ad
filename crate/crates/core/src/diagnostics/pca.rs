use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::positivity::HistoryMatching;
use super::DiagnosticsError;
use crate::cohort::Cohort;
use crate::strategy::{Behavior, StrategyDef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agreement {
    AgreeContinue,
    AgreeStop,
    /// Observed decision differs from the prescription.
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub subject: String,
    pub pc1: f64,
    pub pc2: f64,
    pub prescribed_continue: bool,
    pub label: Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPanel {
    pub epoch: u32,
    pub n: usize,
    /// `None` when no history-compatible state reaches the epoch.
    pub rho: Option<f64>,
    pub points: Vec<PcaPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaAgreementExport {
    pub strategy: String,
    /// Standardized input columns, after dropping constant ones.
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub dropped: Vec<String>,
    /// Unit loading vectors of the two leading components.
    pub loadings: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub explained_ratio: [f64; 2],
    pub panels: Vec<PcaPanel>,
}

/// Leading two eigenpairs of a symmetric matrix, sorted by eigenvalue, each
/// vector signed so its largest-magnitude entry is positive.
pub fn leading_components(cov: &DMatrix<f64>) -> ([Vec<f64>; 2], [f64; 2]) {
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pick = |i: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[i]).iter().copied().collect();
        let anchor = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if anchor < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        (v, eig.eigenvalues[order[i]].max(0.0))
    };
    let (v1, l1) = pick(0);
    let (v2, l2) = pick(1);
    ([v1, v2], [l1, l2])
}

struct Row {
    epoch: u32,
    subject: String,
    values: Vec<f64>,
    prescribed: bool,
    observed: bool,
}

/// Project history-compatible states at `epochs` onto the first two principal
/// components of the standardized covariates, pooled over those epochs.
/// Categorical covariates enter as non-reference indicators; missing values
/// are imputed at the column mean.
pub fn pca_agreement(
    cohort: &Cohort,
    strategy: &StrategyDef,
    epochs: &[u32],
    history: HistoryMatching,
) -> Result<PcaAgreementExport, DiagnosticsError> {
    if epochs.is_empty() {
        return Err(DiagnosticsError::Pca("no epochs selected".into()));
    }
    let g = strategy.compile(&cohort.schema)?;
    let mut names = Vec::new();
    for c in &cohort.schema.covariates {
        match &c.categories {
            Some(levels) => names.extend(levels[1..].iter().map(|l| format!("{}={l}", c.name))),
            None => names.push(c.name.clone()),
        }
    }
    let encode = |state: &[Option<f64>]| -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(names.len());
        for (c, v) in cohort.schema.covariates.iter().zip(state) {
            match &c.categories {
                Some(levels) => {
                    out.extend((1..levels.len()).map(|k| v.map(|v| f64::from(v as usize == k))));
                }
                None => out.push(*v),
            }
        }
        out
    };

    let mut raw: Vec<(u32, String, Vec<Option<f64>>, bool, bool)> = Vec::new();
    for tr in &cohort.trajectories {
        let mut agree = true;
        for rec in &tr.epochs {
            let Some(state) = rec.covariates.as_deref() else { break };
            let prescribed = g.action(rec.epoch, state, Behavior::Observed(rec.treatment))?;
            let compatible = agree || history == HistoryMatching::AtRisk;
            if compatible && epochs.contains(&rec.epoch) {
                raw.push((
                    rec.epoch,
                    tr.subject_id().to_string(),
                    encode(state),
                    prescribed,
                    rec.treatment,
                ));
            }
            agree &= prescribed == rec.treatment;
        }
    }
    if raw.is_empty() {
        return Err(DiagnosticsError::Pca(format!(
            "no history-compatible states at epochs {epochs:?}"
        )));
    }

    let p = names.len();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for j in 0..p {
        let v: Vec<f64> = raw.iter().filter_map(|r| r.2[j]).collect();
        if v.is_empty() {
            continue;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        means[j] = m;
        sds[j] = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    }
    let keep: Vec<usize> = (0..p).filter(|&j| sds[j] > 0.0).collect();
    let dropped = (0..p).filter(|j| !keep.contains(j)).map(|j| names[j].clone()).collect();
    if keep.len() < 2 {
        return Err(DiagnosticsError::Pca(format!(
            "{} non-constant columns; need at least 2",
            keep.len()
        )));
    }
    let rows: Vec<Row> = raw
        .into_iter()
        .map(|(epoch, subject, v, prescribed, observed)| Row {
            epoch,
            subject,
            values: keep
                .iter()
                .map(|&j| v[j].map_or(0.0, |x| (x - means[j]) / sds[j]))
                .collect(),
            prescribed,
            observed,
        })
        .collect();
    let q = keep.len();
    let n = rows.len() as f64;
    let mut cov = DMatrix::<f64>::zeros(q, q);
    for r in &rows {
        for a in 0..q {
            for b in a..q {
                cov[(a, b)] += r.values[a] * r.values[b];
            }
        }
    }
    for a in 0..q {
        for b in a..q {
            cov[(a, b)] /= n;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let total = cov.trace();
    let (loadings, explained_variance) = leading_components(&cov);
    let project = |v: &[f64], l: &[f64]| v.iter().zip(l).map(|(a, b)| a * b).sum::<f64>();

    let panels = epochs
        .iter()
        .map(|&e| {
            let points: Vec<PcaPoint> = rows
                .iter()
                .filter(|r| r.epoch == e)
                .map(|r| PcaPoint {
                    subject: r.subject.clone(),
                    pc1: project(&r.values, &loadings[0]),
                    pc2: project(&r.values, &loadings[1]),
                    prescribed_continue: r.prescribed,
                    label: match (r.prescribed == r.observed, r.prescribed) {
                        (true, true) => Agreement::AgreeContinue,
                        (true, false) => Agreement::AgreeStop,
                        (false, _) => Agreement::Violation,
                    },
                })
                .collect();
            let matched = points.iter().filter(|p| p.label != Agreement::Violation).count();
            PcaPanel {
                epoch: e,
                n: points.len(),
                rho: (!points.is_empty()).then(|| matched as f64 / points.len() as f64),
                points,
            }
        })
        .collect();
    Ok(PcaAgreementExport {
        strategy: strategy.name.clone(),
        columns: keep.iter().map(|&j| names[j].clone()).collect(),
        means: keep.iter().map(|&j| means[j]).collect(),
        sds: keep.iter().map(|&j| sds[j]).collect(),
        dropped,
        explained_ratio: [explained_variance[0] / total, explained_variance[1] / total],
        loadings,
        explained_variance,
        panels,
    })
}
