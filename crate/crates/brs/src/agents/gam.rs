//! Additive models with per-covariate cubic regression splines, a
//! second-derivative (difference) penalty, and smoothing chosen by
//! generalized cross-validation on a 10-point log grid.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::agents::glm::{logistic, RawFit};
use crate::error::{BrsError, Result};

const LN_2PI: f64 = 1.8378770664093453;
const DEGREE: usize = 3;
/// Basis functions per smooth before the identifiability drop; dropping
/// the first leaves 4 effective columns per continuous covariate.
const N_BASIS: usize = 5;
const GCV_GRID: usize = 10;

/// One additive term: binary / few-valued covariates enter linearly,
/// continuous covariates get a centered cubic spline block.
#[derive(Debug, Clone)]
pub enum TermSpec {
    Linear {
        col: usize,
    },
    Smooth {
        col: usize,
        /// Full knot vector (boundary knots repeated DEGREE+1 times).
        knots: Vec<f64>,
        /// Training means of the retained basis columns, for centering.
        centers: Vec<f64>,
    },
}

impl TermSpec {
    fn width(&self) -> usize {
        match self {
            TermSpec::Linear { .. } => 1,
            TermSpec::Smooth { .. } => N_BASIS - 1,
        }
    }
}

/// A fitted additive design: term layout plus the penalty matrix over the
/// full coefficient vector (intercept first).
#[derive(Debug, Clone)]
pub struct SplineDesign {
    pub terms: Vec<TermSpec>,
    penalty: DMatrix<f64>,
}

impl SplineDesign {
    pub fn n_coeffs(&self) -> usize {
        1 + self.terms.iter().map(TermSpec::width).sum::<usize>()
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Build the model matrix for (possibly new) covariate rows.
    pub fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let p = self.n_coeffs();
        let mut m = DMatrix::zeros(n, p);
        for i in 0..n {
            m[(i, 0)] = 1.0;
        }
        let mut offset = 1;
        for term in &self.terms {
            match term {
                TermSpec::Linear { col } => {
                    for i in 0..n {
                        m[(i, offset)] = x[(i, *col)];
                    }
                    offset += 1;
                }
                TermSpec::Smooth { col, knots, centers } => {
                    for i in 0..n {
                        let basis = bspline_basis(knots, x[(i, *col)]);
                        for (k, c) in centers.iter().enumerate() {
                            m[(i, offset + k)] = basis[k + 1] - c;
                        }
                    }
                    offset += N_BASIS - 1;
                }
            }
        }
        m
    }
}

/// Evaluate all cubic B-spline basis functions at x (clamped to the
/// boundary knots) via the de Boor recurrence.
fn bspline_basis(knots: &[f64], x: f64) -> Vec<f64> {
    let nb = knots.len() - DEGREE - 1;
    let lo = knots[DEGREE];
    let hi = knots[knots.len() - DEGREE - 1];
    // Clamp just inside the upper boundary so the half-open intervals of
    // the recurrence cover the closed range.
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let x = x.clamp(lo, hi - 1e-12 * span);
    let mut b = vec![0.0; knots.len() - 1];
    for i in 0..b.len() {
        if knots[i] <= x && x < knots[i + 1] {
            b[i] = 1.0;
        }
    }
    for d in 1..=DEGREE {
        for i in 0..(knots.len() - d - 1) {
            let left_den = knots[i + d] - knots[i];
            let right_den = knots[i + d + 1] - knots[i + 1];
            let left = if left_den > 0.0 {
                (x - knots[i]) / left_den * b[i]
            } else {
                0.0
            };
            let right = if right_den > 0.0 {
                (knots[i + d + 1] - x) / right_den * b[i + 1]
            } else {
                0.0
            };
            b[i] = left + right;
        }
    }
    b.truncate(nb);
    b
}

fn distinct_count(col: &[f64]) -> usize {
    let mut v: Vec<f64> = col.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v.len()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Build the term layout and penalty for training data `x`.
pub fn plan_design(x: &DMatrix<f64>) -> Result<SplineDesign> {
    let q = x.ncols();
    if q > 20 {
        return Err(BrsError::Fit(format!("additive model limited to q <= 20, got {q}")));
    }
    let mut terms = Vec::with_capacity(q);
    for col in 0..q {
        let values: Vec<f64> = x.column(col).iter().copied().collect();
        if distinct_count(&values) < 10 {
            terms.push(TermSpec::Linear { col });
            continue;
        }
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        // N_BASIS cubic basis functions need N_BASIS - DEGREE - 1 interior
        // knots; place them at interior quantiles.
        let n_interior = N_BASIS - DEGREE - 1;
        let mut knots = vec![lo; DEGREE + 1];
        for k in 0..n_interior {
            knots.push(quantile(&sorted, (k + 1) as f64 / (n_interior + 1) as f64));
        }
        knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
        terms.push(TermSpec::Smooth {
            col,
            knots,
            centers: vec![0.0; N_BASIS - 1],
        });
    }

    let mut design = SplineDesign {
        terms,
        penalty: DMatrix::zeros(0, 0),
    };
    // Compute centering constants from the training data.
    let n = x.nrows();
    for term in &mut design.terms {
        if let TermSpec::Smooth { col, knots, centers } = term {
            let mut sums = vec![0.0; N_BASIS - 1];
            for i in 0..n {
                let basis = bspline_basis(knots, x[(i, *col)]);
                for k in 0..N_BASIS - 1 {
                    sums[k] += basis[k + 1];
                }
            }
            for k in 0..N_BASIS - 1 {
                centers[k] = sums[k] / n as f64;
            }
        }
    }

    // Second-difference penalty per smooth block, with the dropped first
    // basis coefficient pinned at zero.
    let p = design.n_coeffs();
    let mut penalty = DMatrix::zeros(p, p);
    let mut offset = 1;
    for term in &design.terms {
        if let TermSpec::Smooth { .. } = term {
            let mut d2 = DMatrix::zeros(N_BASIS - 2, N_BASIS);
            for r in 0..N_BASIS - 2 {
                d2[(r, r)] = 1.0;
                d2[(r, r + 1)] = -2.0;
                d2[(r, r + 2)] = 1.0;
            }
            let s_full = d2.transpose() * d2;
            let s_sub = s_full.view((1, 1), (N_BASIS - 1, N_BASIS - 1));
            penalty
                .view_mut((offset, offset), (N_BASIS - 1, N_BASIS - 1))
                .copy_from(&s_sub.into_owned());
        }
        offset += term.width();
    }
    design.penalty = penalty;
    Ok(design)
}

fn lambda_grid(xtx: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Vec<f64> {
    let tr_s = penalty.trace();
    if tr_s <= 0.0 {
        return vec![0.0];
    }
    let scale = (xtx.trace() / tr_s).max(1e-12);
    (0..GCV_GRID)
        .map(|k| scale * 10f64.powf(-4.0 + 8.0 * k as f64 / (GCV_GRID - 1) as f64))
        .collect()
}

struct PenalizedSolve {
    beta: DVector<f64>,
    inv: DMatrix<f64>,
    edf: f64,
}

fn penalized_solve(
    xtwx: &DMatrix<f64>,
    xtwy: &DVector<f64>,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> Result<PenalizedSolve> {
    let p = xtwx.nrows();
    let mut a = xtwx + penalty * lambda;
    let chol = match Cholesky::new(a.clone()) {
        Some(c) => c,
        None => {
            let jitter = 1e-8 * a.trace() / p as f64;
            for d in 0..p {
                a[(d, d)] += jitter;
            }
            Cholesky::new(a)
                .ok_or_else(|| BrsError::Fit("penalized system is singular".into()))?
        }
    };
    let beta = chol.solve(xtwy);
    let inv = chol.inverse();
    let edf = (&inv * xtwx).trace();
    Ok(PenalizedSolve { beta, inv, edf })
}

/// Penalized least-squares additive fit with GCV-selected smoothing.
pub fn fit_additive_gaussian(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<(RawFit, SplineDesign)> {
    let spec = plan_design(x)?;
    let design = spec.design(x);
    let n = design.nrows();
    let p = design.ncols();
    if n <= p {
        return Err(BrsError::Fit(format!("n = {n} <= p = {p} in additive fit")));
    }
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * y;

    let mut best: Option<(f64, f64, PenalizedSolve)> = None;
    for lambda in lambda_grid(&xtx, spec.penalty()) {
        let solve = penalized_solve(&xtx, &xty, spec.penalty(), lambda)?;
        let resid = y - &design * &solve.beta;
        let rss: f64 = resid.iter().map(|r| r * r).sum();
        let denom = (n as f64 - solve.edf).max(1.0);
        let gcv = n as f64 * rss / (denom * denom);
        if best.as_ref().is_none_or(|(g, _, _)| gcv < *g) {
            best = Some((gcv, lambda, solve));
        }
    }
    let (_, _, solve) = best.expect("non-empty lambda grid");

    let resid = y - &design * &solve.beta;
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let edf = solve.edf;
    let dispersion = rss / (n as f64 - edf).max(1.0);
    let sigma2_mle = (rss / n as f64).max(1e-12);
    let loglik = -0.5 * n as f64 * (LN_2PI + sigma2_mle.ln()) - rss / (2.0 * sigma2_mle);
    let p_eff = edf + 1.0;
    let fit = RawFit {
        coef_covariance: &solve.inv * dispersion,
        coefficients: solve.beta,
        dispersion,
        loglik,
        aic: -2.0 * loglik + 2.0 * p_eff,
        bic: -2.0 * loglik + p_eff * (n as f64).ln(),
        n_fit: n,
        edf,
        ridge_fallback: false,
        separation_flag: false,
    };
    Ok((fit, spec))
}

/// Penalized IRLS additive logistic fit with GCV-selected smoothing.
pub fn fit_additive_logistic(z: &[u8], x: &DMatrix<f64>) -> Result<(RawFit, SplineDesign)> {
    let spec = plan_design(x)?;
    let design = spec.design(x);
    let n = design.nrows();
    let p = design.ncols();
    let ones = z.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(BrsError::Fit("both classes must be present".into()));
    }

    let pirls = |lambda: f64| -> Result<(PenalizedSolve, f64, DMatrix<f64>)> {
        let mut beta = DVector::zeros(p);
        let mut last_ll = f64::NEG_INFINITY;
        for iter in 0..50 {
            let lin = &design * &beta;
            let probs: Vec<f64> = lin.iter().map(|&e| logistic(e)).collect();
            let ll: f64 = (0..n)
                .map(|i| {
                    let p_i = probs[i].clamp(1e-12, 1.0 - 1e-12);
                    if z[i] == 1 { p_i.ln() } else { (1.0 - p_i).ln() }
                })
                .sum();
            let penalized_ll = ll - 0.5 * lambda * (spec.penalty() * &beta).dot(&beta);
            // Working response on the linear-predictor scale.
            let mut xtwx = DMatrix::zeros(p, p);
            let mut xtwy = DVector::zeros(p);
            for i in 0..n {
                let w = (probs[i] * (1.0 - probs[i])).max(1e-8);
                let working = lin[i] + (f64::from(z[i]) - probs[i]) / w;
                let row = design.row(i);
                for a in 0..p {
                    xtwy[a] += w * row[a] * working;
                    for b in a..p {
                        xtwx[(a, b)] += w * row[a] * row[b];
                    }
                }
            }
            for a in 0..p {
                for b in 0..a {
                    xtwx[(a, b)] = xtwx[(b, a)];
                }
            }
            let solve = penalized_solve(&xtwx, &xtwy, spec.penalty(), lambda)?;
            let delta = (&solve.beta - &beta).amax();
            beta = solve.beta.clone();
            if delta < 1e-8 || (penalized_ll - last_ll).abs() < 1e-10 * (1.0 + last_ll.abs()) {
                return Ok((
                    PenalizedSolve { beta, inv: solve.inv, edf: solve.edf },
                    ll,
                    xtwx,
                ));
            }
            last_ll = penalized_ll;
            if iter == 49 {
                return Err(BrsError::Fit(format!(
                    "additive logistic fit did not converge (lambda = {lambda:.3e}, last step {delta:.3e})"
                )));
            }
        }
        unreachable!()
    };

    let design_xtx = design.transpose() * &design;
    let mut best: Option<(f64, PenalizedSolve, f64)> = None;
    for lambda in lambda_grid(&design_xtx, spec.penalty()) {
        let (solve, ll, _) = pirls(lambda)?;
        let deviance = -2.0 * ll;
        let denom = (n as f64 - solve.edf).max(1.0);
        let gcv = n as f64 * deviance / (denom * denom);
        if best.as_ref().is_none_or(|(g, _, _)| gcv < *g) {
            best = Some((gcv, solve, ll));
        }
    }
    let (_, solve, loglik) = best.expect("non-empty lambda grid");
    let edf = solve.edf;
    let fit = RawFit {
        coef_covariance: solve.inv.clone(),
        coefficients: solve.beta,
        dispersion: 1.0,
        loglik,
        aic: -2.0 * loglik + 2.0 * edf,
        bic: -2.0 * loglik + edf * (n as f64).ln(),
        n_fit: n,
        edf,
        ridge_fallback: false,
        separation_flag: false,
    };
    Ok((fit, spec))
}
