//! Linear-Gaussian and logistic-binomial fits on an explicit design
//! matrix (intercept included as the first column).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{BrsError, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Outcome of a parametric fit before it is wrapped into a
/// `FittedRegression` with its feature map.
#[derive(Debug, Clone)]
pub struct RawFit {
    pub coefficients: DVector<f64>,
    pub coef_covariance: DMatrix<f64>,
    pub dispersion: f64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_fit: usize,
    pub edf: f64,
    pub ridge_fallback: bool,
    pub separation_flag: bool,
}

/// Solve the (possibly penalized) normal equations, falling back to a
/// ridge jitter of 1e-8 * trace / p when the Cholesky fails.
fn solve_spd(
    mut a: DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, bool)> {
    let p = a.nrows();
    let scale = (a.trace() / p as f64).max(f64::MIN_POSITIVE);
    if let Some(chol) = Cholesky::new(a.clone()) {
        // A numerically rank-deficient matrix can still factor in floating
        // point; tiny pivots betray it.
        let l = chol.l_dirty();
        if (0..p).all(|d| l[(d, d)] * l[(d, d)] > 1e-10 * scale) {
            return Ok((chol.solve(rhs), chol.inverse(), false));
        }
    }
    let jitter = 1e-8 * scale;
    for d in 0..p {
        a[(d, d)] += jitter;
    }
    let chol = Cholesky::new(a)
        .ok_or_else(|| BrsError::Fit("design is rank deficient beyond ridge repair".into()))?;
    Ok((chol.solve(rhs), chol.inverse(), true))
}

/// Ordinary least squares with Gaussian log-likelihood bookkeeping.
/// The Gaussian AIC/BIC count the variance parameter (p_eff = p + 1).
pub fn fit_linear_gaussian(y: &DVector<f64>, design: &DMatrix<f64>) -> Result<RawFit> {
    let n = design.nrows();
    let p = design.ncols();
    if y.len() != n {
        return Err(BrsError::Fit(format!("{n} rows but {} responses", y.len())));
    }
    if n <= p {
        return Err(BrsError::Fit(format!("n = {n} <= p = {p}")));
    }
    let xtx = design.transpose() * design;
    let xty = design.transpose() * y;
    let (beta, xtx_inv, ridge_fallback) = solve_spd(xtx, &xty)?;
    let resid = y - design * &beta;
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let dispersion = rss / (n - p) as f64;
    let coef_covariance = &xtx_inv * dispersion;
    // MLE variance, floored so degenerate exact fits keep AIC/BIC finite.
    let sigma2_mle = (rss / n as f64).max(1e-12);
    let loglik = -0.5 * n as f64 * (LN_2PI + sigma2_mle.ln()) - rss / (2.0 * sigma2_mle);
    let p_eff = (p + 1) as f64;
    Ok(RawFit {
        coefficients: beta,
        coef_covariance,
        dispersion,
        loglik,
        aic: -2.0 * loglik + 2.0 * p_eff,
        bic: -2.0 * loglik + p_eff * (n as f64).ln(),
        n_fit: n,
        edf: p as f64,
        ridge_fallback,
        separation_flag: false,
    })
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic regression by Newton/IRLS. Converges when max |score| < 1e-8
/// or the relative log-likelihood change is < 1e-10, capped at 100
/// iterations. Perfect separation is flagged, not fatal.
pub fn fit_logistic_irls(z: &[u8], design: &DMatrix<f64>) -> Result<RawFit> {
    let n = design.nrows();
    let p = design.ncols();
    if z.len() != n {
        return Err(BrsError::Fit(format!("{n} rows but {} responses", z.len())));
    }
    let ones = z.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(BrsError::Fit("both classes must be present".into()));
    }

    let mut beta = DVector::zeros(p);
    let mut loglik = f64::NEG_INFINITY;
    let mut ridge_fallback = false;
    let mut converged = false;
    let mut max_score = f64::INFINITY;
    for _ in 0..100 {
        let lin = design * &beta;
        let probs: Vec<f64> = lin.iter().map(|&e| logistic(e)).collect();
        let ll: f64 = (0..n)
            .map(|i| {
                let p_i = probs[i].clamp(1e-12, 1.0 - 1e-12);
                if z[i] == 1 {
                    p_i.ln()
                } else {
                    (1.0 - p_i).ln()
                }
            })
            .sum();
        let score = design.transpose()
            * DVector::from_fn(n, |i, _| f64::from(z[i]) - probs[i]);
        max_score = score.amax();
        let rel_change = (ll - loglik).abs() / (1.0 + ll.abs());
        loglik = ll;
        if max_score < 1e-8 || rel_change < 1e-10 {
            converged = true;
            break;
        }
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = (probs[i] * (1.0 - probs[i])).max(1e-12);
            let row = design.row(i);
            for a in 0..p {
                for b in a..p {
                    info[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let (step, _, ridged) = solve_spd(info, &score)?;
        ridge_fallback |= ridged;
        beta += step;
    }

    // Runaway coefficients with a non-converged score mark separation; so
    // does a near-zero deviance, which only separable data can reach (the
    // score can numerically vanish there before coefficients blow up).
    let separation_flag = (!converged && beta.iter().any(|b| b.abs() > 30.0) && max_score > 1e-8)
        || loglik > -1e-6;

    // Observed information at the final iterate.
    let lin = design * &beta;
    let mut info = DMatrix::zeros(p, p);
    for i in 0..n {
        let p_i = logistic(lin[i]);
        let w = (p_i * (1.0 - p_i)).max(1e-12);
        let row = design.row(i);
        for a in 0..p {
            for b in a..p {
                info[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    let (_, cov, ridged) = solve_spd(info, &DVector::zeros(p))?;
    let ridge_fallback = ridge_fallback | ridged;

    let p_eff = p as f64;
    Ok(RawFit {
        coefficients: beta,
        coef_covariance: cov,
        dispersion: 1.0,
        loglik,
        aic: -2.0 * loglik + 2.0 * p_eff,
        bic: -2.0 * loglik + p_eff * (n as f64).ln(),
        n_fit: n,
        edf: p as f64,
        ridge_fallback,
        separation_flag,
    })
}
