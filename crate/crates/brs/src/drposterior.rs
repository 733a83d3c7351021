//! Doubly robust (AIPW) ATE estimation: the weighted point estimator, a
//! centered influence-function variance, the Bayesian-bootstrap posterior
//! over Dirichlet unit weights, and the baseline ensemble combiners
//! (simple averaging, smoothed-AIC, and BIC-based model averaging).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::agents::{predict_agents, AgentSet};
use crate::datamodel::{clip_propensity, Dataset, CLIP_EPS};
use crate::error::{BrsError, Result};
use crate::rng::stream_rng;

/// Plug-in nuisance functions and the observed (Y, Z) they act on.
/// Propensities are clipped into [CLIP_EPS, 1 - CLIP_EPS] on construction.
#[derive(Debug, Clone)]
pub struct DrInputs {
    pub mu1: DVector<f64>,
    pub mu0: DVector<f64>,
    pub pi: DVector<f64>,
    pub y: DVector<f64>,
    pub z: Vec<u8>,
}

impl DrInputs {
    pub fn new(
        mu1: DVector<f64>,
        mu0: DVector<f64>,
        pi: DVector<f64>,
        y: DVector<f64>,
        z: Vec<u8>,
    ) -> Result<Self> {
        let n = y.len();
        if mu1.len() != n || mu0.len() != n || pi.len() != n || z.len() != n {
            return Err(BrsError::Contract(format!(
                "DR inputs must share length: mu1 {}, mu0 {}, pi {}, y {}, z {}",
                mu1.len(),
                mu0.len(),
                pi.len(),
                n,
                z.len()
            )));
        }
        if n == 0 {
            return Err(BrsError::Contract("DR inputs are empty".into()));
        }
        let pi = pi.map(clip_propensity);
        for (i, &p) in pi.iter().enumerate() {
            if !(p >= CLIP_EPS && p <= 1.0 - CLIP_EPS) {
                return Err(BrsError::Contract(format!(
                    "propensity {p} at unit {i} is outside (0, 1) after clipping"
                )));
            }
        }
        Ok(DrInputs { mu1, mu0, pi, y, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Per-unit influence term: the treated-arm augmented mean minus the
    /// control-arm one.
    fn influence(&self, i: usize) -> f64 {
        let z = f64::from(self.z[i]);
        let (y, p) = (self.y[i], self.pi[i]);
        let treated = z * y / p - (z - p) / p * self.mu1[i];
        let control = (1.0 - z) * y / (1.0 - p) + (z - p) / (1.0 - p) * self.mu0[i];
        treated - control
    }
}

fn check_unit_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(BrsError::Contract(format!(
            "expected {n} unit weights, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(BrsError::Contract("unit weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(BrsError::Contract(format!(
            "unit weights must sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Weighted AIPW estimate of the ATE.
pub fn dr_point(inputs: &DrInputs, unit_weights: &[f64]) -> Result<f64> {
    check_unit_weights(unit_weights, inputs.n())?;
    Ok((0..inputs.n())
        .map(|i| unit_weights[i] * inputs.influence(i))
        .sum())
}

fn equal_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Equal-weight AIPW estimate.
pub fn dr_point_equal(inputs: &DrInputs) -> Result<f64> {
    dr_point(inputs, &equal_weights(inputs.n()))
}

/// Centered influence-function variance V = (1/n) sum (zeta_i - tau)^2,
/// an estimate of n * Var(tau_hat).
pub fn influence_variance(inputs: &DrInputs) -> Result<f64> {
    let n = inputs.n() as f64;
    let tau = dr_point_equal(inputs)?;
    Ok((0..inputs.n())
        .map(|i| (inputs.influence(i) - tau).powi(2))
        .sum::<f64>()
        / n)
}

/// Equal-weight estimate with a 95% Wald interval from the centered
/// influence-function variance.
pub fn dr_estimate_with_ci(inputs: &DrInputs) -> Result<(f64, (f64, f64))> {
    let tau = dr_point_equal(inputs)?;
    let se = (influence_variance(inputs)? / inputs.n() as f64).sqrt();
    Ok((tau, (tau - 1.96 * se, tau + 1.96 * se)))
}

/// Bayesian-bootstrap posterior for the ATE.
#[derive(Debug, Clone)]
pub struct DrPosterior {
    /// One tau draw per bootstrap iteration.
    pub draws: Vec<f64>,
    /// Posterior mean.
    pub point: f64,
    /// Central 95% posterior interval.
    pub interval: (f64, f64),
    /// Equal-weight estimate at the posterior-mean nuisances.
    pub plain_dr: f64,
    /// Influence-function variance at the posterior-mean nuisances.
    pub influence_var: f64,
}

impl DrPosterior {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.interval;
        if lo > hi {
            return Err(BrsError::Validation(format!(
                "posterior interval is inverted: [{lo}, {hi}]"
            )));
        }
        let min = self.draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if self.point < min || self.point > max {
            return Err(BrsError::Validation(format!(
                "posterior mean {} outside draw range [{min}, {max}]",
                self.point
            )));
        }
        Ok(())
    }

    pub fn sd(&self) -> f64 {
        let b = self.draws.len() as f64;
        let var = self
            .draws
            .iter()
            .map(|t| (t - self.point).powi(2))
            .sum::<f64>()
            / (b - 1.0);
        var.sqrt()
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Dirichlet(1, ..., 1) unit weights: normalized standard exponentials.
fn dirichlet_weights<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::Exp1)).collect();
    let total: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= total;
    }
    w
}

/// Bayesian bootstrap over B paired draws of the synthesized nuisance
/// functions (rows of the three B x n matrices).
pub fn bootstrap_dr_posterior(
    mu1_draws: &DMatrix<f64>,
    mu0_draws: &DMatrix<f64>,
    pi_draws: &DMatrix<f64>,
    data: &Dataset,
    seed: u64,
) -> Result<DrPosterior> {
    let b = mu1_draws.nrows();
    if mu0_draws.nrows() != b || pi_draws.nrows() != b {
        return Err(BrsError::Contract(format!(
            "nuisance draw counts differ: mu1 {b}, mu0 {}, pi {}",
            mu0_draws.nrows(),
            pi_draws.nrows()
        )));
    }
    if b == 0 {
        return Err(BrsError::Contract("need at least one nuisance draw".into()));
    }
    let n = data.n();
    let mut rng = stream_rng(seed, "drposterior/bootstrap");
    let mut draws = Vec::with_capacity(b);
    for it in 0..b {
        let inputs = DrInputs::new(
            mu1_draws.row(it).transpose(),
            mu0_draws.row(it).transpose(),
            pi_draws.row(it).transpose(),
            data.outcomes.clone(),
            data.treatments.clone(),
        )?;
        let w = dirichlet_weights(n, &mut rng);
        draws.push(dr_point(&inputs, &w)?);
    }

    let point = draws.iter().sum::<f64>() / b as f64;
    let mut sorted = draws.clone();
    sorted.sort_by(|a, c| a.partial_cmp(c).unwrap());
    let interval = (quantile(&sorted, 0.025), quantile(&sorted, 0.975));

    // Plain DR diagnostics at the posterior-mean nuisance functions.
    let col_mean = |m: &DMatrix<f64>| {
        DVector::from_fn(n, |i, _| m.column(i).sum() / b as f64)
    };
    let mean_inputs = DrInputs::new(
        col_mean(mu1_draws),
        col_mean(mu0_draws),
        col_mean(pi_draws),
        data.outcomes.clone(),
        data.treatments.clone(),
    )?;
    let posterior = DrPosterior {
        draws,
        point,
        interval,
        plain_dr: dr_point_equal(&mean_inputs)?,
        influence_var: influence_variance(&mean_inputs)?,
    };
    posterior.validate()?;
    Ok(posterior)
}

/// How a baseline ensemble weights its candidate models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMethod {
    /// Simple averaging: equal weights.
    Sa,
    /// Smoothed information criterion: normalized Akaike weights.
    Sic,
    /// Bayesian model averaging via the BIC marginal-likelihood
    /// approximation under a uniform model prior.
    Bma,
}

#[derive(Debug, Clone)]
pub struct EnsembleWeights {
    pub method: EnsembleMethod,
    pub w: Vec<f64>,
}

impl EnsembleWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(BrsError::Validation("ensemble weights must be nonnegative".into()));
        }
        let total: f64 = self.w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BrsError::Validation(format!(
                "ensemble weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

fn criterion_weights(crit: &[f64]) -> Vec<f64> {
    let min = crit.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = crit.iter().map(|c| (-(c - min) / 2.0).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Model weights from the fitted criteria: SA ignores them, SIC uses
/// exp(-dAIC/2), BMA uses exp(-dBIC/2).
pub fn ensemble_weights(
    method: EnsembleMethod,
    aics: &[f64],
    bics: &[f64],
) -> Result<EnsembleWeights> {
    let j = aics.len();
    if j == 0 || bics.len() != j {
        return Err(BrsError::Contract(format!(
            "need matched nonempty criteria, got {j} AICs and {} BICs",
            bics.len()
        )));
    }
    if aics.iter().chain(bics.iter()).any(|c| !c.is_finite()) {
        return Err(BrsError::Numerical("non-finite information criterion".into()));
    }
    let w = match method {
        EnsembleMethod::Sa => vec![1.0 / j as f64; j],
        EnsembleMethod::Sic => criterion_weights(aics),
        EnsembleMethod::Bma => criterion_weights(bics),
    };
    let weights = EnsembleWeights { method, w };
    weights.validate()?;
    Ok(weights)
}

/// Model-averaged nuisance functions: each nuisance is the weighted
/// average of its agents' predictive means.
pub fn combined_dr_inputs(
    agents: &AgentSet,
    weights_outcome: &EnsembleWeights,
    weights_propensity: &EnsembleWeights,
    data: &Dataset,
) -> Result<DrInputs> {
    weights_outcome.validate()?;
    weights_propensity.validate()?;
    let j = agents.n_models();
    if weights_outcome.w.len() != j || weights_propensity.w.len() != j {
        return Err(BrsError::Contract(format!(
            "weight vectors must have length {j}"
        )));
    }
    let (mu1p, mu0p, pip) = predict_agents(agents, &data.covariates)?;
    let n = data.n();
    let average = |means: &DMatrix<f64>, w: &[f64]| {
        DVector::from_fn(n, |i, _| {
            (0..j).map(|k| w[k] * means[(i, k)]).sum::<f64>()
        })
    };
    DrInputs::new(
        average(&mu1p.means, &weights_outcome.w),
        average(&mu0p.means, &weights_outcome.w),
        average(&pip.means, &weights_propensity.w),
        data.outcomes.clone(),
        data.treatments.clone(),
    )
}

/// DR estimate and Wald CI at the model-averaged nuisances.
pub fn combined_dr_estimate(
    agents: &AgentSet,
    weights_outcome: &EnsembleWeights,
    weights_propensity: &EnsembleWeights,
    data: &Dataset,
) -> Result<(f64, (f64, f64))> {
    let inputs = combined_dr_inputs(agents, weights_outcome, weights_propensity, data)?;
    dr_estimate_with_ci(&inputs)
}
