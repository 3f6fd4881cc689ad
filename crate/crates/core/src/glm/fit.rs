use nalgebra::{DMatrix, DVector};

use super::{linear_predictor, softmax_into, Design, Family, FitOptions, FittedGlm, GlmError, DISPERSION_FLOOR};

/// Fit a GLM by (penalized) maximum likelihood.
///
/// `weights` are frequency weights; a row with weight `k` counts as `k`
/// identical observations, so bootstrap refits can reuse one design.
pub fn fit_glm(
    family: Family,
    x: &Design,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<FittedGlm, GlmError> {
    let rows = x.nrows();
    if y.len() != rows {
        return Err(GlmError::RowMismatch {
            rows,
            response: y.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != rows {
            return Err(GlmError::RowMismatch {
                rows,
                response: w.len(),
            });
        }
    }
    for i in 0..rows {
        if !y[i].is_finite() || x.row(i).iter().any(|v| !v.is_finite()) {
            return Err(GlmError::NonFinite { row: i });
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);

    match family {
        Family::Normal | Family::BoundedNormal | Family::TruncatedNormal => {
            let active: Vec<usize> = (0..rows).filter(|&i| weight(i) > 0.0).collect();
            let mut fitted = fit_gaussian(x, y, &active, &weight, opts)?;
            fitted.family = family;
            if family != Family::Normal {
                fitted.fit_bounds = observed_range(active.iter().map(|&i| y[i]));
            }
            Ok(fitted)
        }
        Family::ZeroInflatedNormal => {
            let mut classes = Vec::with_capacity(rows);
            for (i, &v) in y.iter().enumerate() {
                if v < 0.0 {
                    return Err(GlmError::OutOfSupport {
                        family: family.name(),
                        row: i,
                        value: v,
                    });
                }
                classes.push(usize::from(v == 0.0));
            }
            let active: Vec<usize> = (0..rows).filter(|&i| weight(i) > 0.0).collect();
            let (zero_blocks, zero_iters, _) = fit_softmax(x, &classes, 2, &active, &weight, opts)?;
            let positive: Vec<usize> = active.iter().copied().filter(|&i| y[i] > 0.0).collect();
            let mut gaussian = fit_gaussian(x, y, &positive, &weight, opts)?;
            gaussian.family = family;
            gaussian.zero_part = zero_blocks.into_iter().next();
            gaussian.fit_bounds = observed_range(positive.iter().map(|&i| y[i]));
            gaussian.n_obs = active.iter().map(|&i| weight(i)).sum();
            gaussian.iterations = zero_iters;
            Ok(gaussian)
        }
        Family::Binomial => {
            let classes = discrete_classes(family, y, 2)?;
            let active: Vec<usize> = (0..rows).filter(|&i| weight(i) > 0.0).collect();
            let (blocks, iterations, se) = fit_softmax(x, &classes, 2, &active, &weight, opts)?;
            let mut fitted = FittedGlm::binomial(blocks.into_iter().next().unwrap_or_default());
            fitted.standard_errors = Some(se);
            fitted.n_obs = active.iter().map(|&i| weight(i)).sum();
            fitted.iterations = iterations;
            Ok(fitted)
        }
        Family::Categorical { n_categories } => {
            let classes = discrete_classes(family, y, n_categories)?;
            let active: Vec<usize> = (0..rows).filter(|&i| weight(i) > 0.0).collect();
            let (blocks, iterations, _) = fit_softmax(x, &classes, n_categories, &active, &weight, opts)?;
            let mut fitted = FittedGlm::categorical(blocks);
            fitted.n_obs = active.iter().map(|&i| weight(i)).sum();
            fitted.iterations = iterations;
            Ok(fitted)
        }
    }
}

fn observed_range(values: impl Iterator<Item = f64>) -> Option<[f64; 2]> {
    values.fold(None, |acc, v| match acc {
        None => Some([v, v]),
        Some([lo, hi]) => Some([lo.min(v), hi.max(v)]),
    })
}

fn discrete_classes(family: Family, y: &[f64], k: usize) -> Result<Vec<usize>, GlmError> {
    y.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < k {
                Ok(v as usize)
            } else {
                Err(GlmError::OutOfSupport {
                    family: family.name(),
                    row: i,
                    value: v,
                })
            }
        })
        .collect()
}

/// `p` counts coefficients including the intercept.
fn require_rows(active: usize, p: usize) -> Result<(), GlmError> {
    if active < p {
        return Err(GlmError::InsufficientRows {
            required: p,
            available: active,
        });
    }
    Ok(())
}

/// Solve `a * s = b` for symmetric positive definite `a`. With a positive ridge,
/// numerically singular systems are retried with a growing diagonal jitter.
fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<DVector<f64>, GlmError> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut jitter = 0.0;
    for _ in 0..6 {
        if let Some(chol) = a.clone().cholesky() {
            let l = chol.l_dirty();
            let diag: Vec<f64> = (0..n).map(|i| l[(i, i)] * l[(i, i)]).collect();
            let max = diag.iter().copied().fold(0.0, f64::max);
            let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
            if min > 1e-13 * max || (ridge > 0.0 && min > 0.0) {
                return Ok(chol.solve(b));
            }
        }
        if ridge <= 0.0 {
            return Err(GlmError::RankDeficient);
        }
        let next = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
        for i in 0..n {
            a[(i, i)] += next - jitter;
        }
        jitter = next;
    }
    Err(GlmError::RankDeficient)
}

fn fit_gaussian(
    x: &Design,
    y: &[f64],
    active: &[usize],
    weight: &dyn Fn(usize) -> f64,
    opts: &FitOptions,
) -> Result<FittedGlm, GlmError> {
    let p = x.ncols() + 1;
    require_rows(active.len(), p)?;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    row[0] = 1.0;
    for &i in active {
        let w = weight(i);
        row[1..].copy_from_slice(x.row(i));
        for a in 0..p {
            let wa = w * row[a];
            xty[a] += wa * y[i];
            for b in a..p {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        xtx[(a, a)] += opts.ridge_penalty;
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let beta = solve_spd(xtx, &xty, opts.ridge_penalty)?;
    let coefficients: Vec<f64> = beta.iter().copied().collect();

    let mut rss = 0.0;
    let mut total_weight = 0.0;
    for &i in active {
        let w = weight(i);
        let r = y[i] - linear_predictor(&coefficients, x.row(i));
        rss += w * r * r;
        total_weight += w;
    }
    let dof = total_weight - p as f64;
    let dispersion = if dof > 0.0 { rss / dof } else { 0.0 };

    let mut fitted = FittedGlm::normal(coefficients, dispersion.max(DISPERSION_FLOOR));
    fitted.n_obs = total_weight;
    fitted.iterations = 1;
    Ok(fitted)
}

/// Penalized log-likelihood of a softmax model with reference category 0.
fn softmax_objective(
    x: &Design,
    classes: &[usize],
    active: &[usize],
    weight: &dyn Fn(usize) -> f64,
    blocks: &[Vec<f64>],
    ridge: f64,
    probs: &mut Vec<f64>,
) -> f64 {
    let mut ll = 0.0;
    for &i in active {
        softmax_into(blocks, x.row(i), probs);
        ll += weight(i) * probs[classes[i]].max(f64::MIN_POSITIVE).ln();
    }
    let penalty: f64 = blocks.iter().flatten().map(|b| b * b).sum();
    ll - 0.5 * ridge * penalty
}

/// Newton-Raphson (IRLS) for the multinomial logit; K = 2 is logistic regression.
fn fit_softmax(
    x: &Design,
    classes: &[usize],
    k: usize,
    active: &[usize],
    weight: &dyn Fn(usize) -> f64,
    opts: &FitOptions,
) -> Result<(Vec<Vec<f64>>, usize, Vec<f64>), GlmError> {
    let p = x.ncols() + 1;
    require_rows(active.len(), p)?;
    let m = k - 1;
    let dim = m * p;
    let mut blocks = vec![vec![0.0; p]; m];
    let mut probs = Vec::with_capacity(k);
    let mut objective = softmax_objective(x, classes, active, weight, &blocks, opts.ridge_penalty, &mut probs);
    let mut row = vec![0.0; p];
    row[0] = 1.0;
    let mut last_change = f64::INFINITY;

    for iteration in 1..=opts.max_iterations {
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut grad = DVector::<f64>::zeros(dim);
        for &i in active {
            let w = weight(i);
            row[1..].copy_from_slice(x.row(i));
            softmax_into(&blocks, &row[1..], &mut probs);
            for a in 0..m {
                let pa = probs[a + 1];
                let resid = f64::from(u8::from(classes[i] == a + 1)) - pa;
                for c in 0..p {
                    grad[a * p + c] += w * resid * row[c];
                }
                for b in a..m {
                    let pb = probs[b + 1];
                    let coef = w * pa * (f64::from(u8::from(a == b)) - pb);
                    if coef == 0.0 {
                        continue;
                    }
                    for c in 0..p {
                        let wc = coef * row[c];
                        let start = if a == b { c } else { 0 };
                        for d in start..p {
                            hess[(a * p + c, b * p + d)] += wc * row[d];
                        }
                    }
                }
            }
        }
        for a in 0..m {
            for c in 0..p {
                grad[a * p + c] -= opts.ridge_penalty * blocks[a][c];
            }
        }
        for r in 0..dim {
            hess[(r, r)] += opts.ridge_penalty;
        }
        // mirror the upper triangle
        for r in 0..dim {
            for c in 0..r {
                hess[(r, c)] = hess[(c, r)];
            }
        }

        let information = hess.clone();
        let step = solve_spd(hess, &grad, opts.ridge_penalty)?;
        let mut t = 1.0;
        let mut candidate;
        let mut cand_objective;
        loop {
            candidate = blocks.clone();
            for a in 0..m {
                for c in 0..p {
                    candidate[a][c] += t * step[a * p + c];
                }
            }
            cand_objective = softmax_objective(x, classes, active, weight, &candidate, opts.ridge_penalty, &mut probs);
            if cand_objective >= objective - 1e-12 * objective.abs().max(1.0) || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        last_change = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        blocks = candidate;
        objective = cand_objective;
        let size = blocks.iter().flatten().fold(0.0f64, |acc, b| acc.max(b.abs()));
        if last_change < opts.convergence_tolerance * (1.0 + size) {
            let se = information
                .cholesky()
                .map(|c| c.inverse().diagonal().iter().map(|v| v.sqrt()).collect())
                .unwrap_or_else(|| vec![f64::NAN; dim]);
            return Ok((blocks, iteration, se));
        }
    }
    Err(GlmError::NonConvergence {
        iterations: opts.max_iterations,
        change: last_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unpenalized() -> FitOptions {
        FitOptions {
            ridge_penalty: 0.0,
            ..FitOptions::default()
        }
    }

    #[test]
    fn symmetric_binomial_has_zero_intercept() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..50 {
            rows.push(vec![-1.0]);
            y.push(0.0);
            rows.push(vec![1.0]);
            y.push(1.0);
        }
        let x = Design::from_rows(1, &rows).unwrap();
        let opts = FitOptions {
            ridge_penalty: 0.01,
            ..FitOptions::default()
        };
        let m = fit_glm(Family::Binomial, &x, &y, None, &opts).unwrap();
        assert!(m.coefficients[0].abs() < 1e-10);
        assert!(m.coefficients[1] > 5.0);
    }

    #[test]
    fn frequency_weights_match_duplicated_rows() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![1.5]];
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        let w = vec![2.0, 1.0, 3.0, 1.0, 0.0];
        let x = Design::from_rows(1, &rows).unwrap();
        let weighted = fit_glm(Family::Binomial, &x, &y, Some(&w), &unpenalized()).unwrap();

        let mut dup_rows = Vec::new();
        let mut dup_y = Vec::new();
        for (i, &count) in w.iter().enumerate() {
            for _ in 0..count as usize {
                dup_rows.push(rows[i].clone());
                dup_y.push(y[i]);
            }
        }
        let dx = Design::from_rows(1, &dup_rows).unwrap();
        let dup = fit_glm(Family::Binomial, &dx, &dup_y, None, &unpenalized()).unwrap();
        for (a, b) in weighted.coefficients.iter().zip(&dup.coefficients) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_without_ridge_is_an_error() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 + 1.0).collect();
        let x = Design::from_rows(2, &rows).unwrap();
        assert_eq!(
            fit_glm(Family::Normal, &x, &y, None, &unpenalized()),
            Err(GlmError::RankDeficient)
        );
        // the default ridge floor makes it solvable
        assert!(fit_glm(Family::Normal, &x, &y, None, &FitOptions::default()).is_ok());
    }

    #[test]
    fn response_outside_support_is_rejected() {
        let x = Design::from_rows(1, &[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let err = fit_glm(Family::Binomial, &x, &[0.0, 2.0, 1.0], None, &FitOptions::default());
        assert!(matches!(err, Err(GlmError::OutOfSupport { row: 1, .. })));
        let err = fit_glm(
            Family::ZeroInflatedNormal,
            &x,
            &[0.0, -1.0, 1.0],
            None,
            &FitOptions::default(),
        );
        assert!(matches!(err, Err(GlmError::OutOfSupport { row: 1, .. })));
    }

    #[test]
    fn too_few_rows() {
        let x = Design::from_rows(2, &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            fit_glm(Family::Normal, &x, &[1.0, 2.0], None, &FitOptions::default()),
            Err(GlmError::InsufficientRows {
                required: 3,
                available: 2
            })
        );
    }

    #[test]
    fn constant_response_hits_dispersion_floor() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let x = Design::from_rows(1, &rows).unwrap();
        let m = fit_glm(Family::Normal, &x, &[4.0; 6], None, &FitOptions::default()).unwrap();
        assert_eq!(m.dispersion, DISPERSION_FLOOR);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0]).collect();
        let y: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let x = Design::from_rows(1, &rows).unwrap();
        let opts = FitOptions {
            max_iterations: 1,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_glm(Family::Binomial, &x, &y, None, &opts),
            Err(GlmError::NonConvergence { iterations: 1, .. })
        ));
    }

    #[test]
    fn bounded_families_record_observed_range() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y = vec![3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let x = Design::from_rows(1, &rows).unwrap();
        let m = fit_glm(Family::TruncatedNormal, &x, &y, None, &FitOptions::default()).unwrap();
        assert_eq!(m.fit_bounds, Some([1.0, 9.0]));
        let z = fit_glm(
            Family::ZeroInflatedNormal,
            &x,
            &[0.0, 2.0, 0.0, 3.0, 4.0, 0.0, 7.0, 5.0],
            None,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(z.fit_bounds, Some([2.0, 7.0]));
        let p0 = z.zero_probability(&[2.0]).unwrap();
        assert!(p0 > 0.0 && p0 < 1.0);
    }
}
