//! The two Gibbs samplers that synthesize agent predictives with
//! covariate-dependent weights: a continuous-response sampler for the
//! outcome means and a Polya-Gamma-augmented binary sampler for the
//! propensity. Weight processes beta_j(X) carry nearest-neighbor
//! Gaussian-process priors.

pub mod diagnostics;
pub mod geweke;
pub mod polya_gamma;

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datamodel::{clip_propensity, AgentPredictive, PredictiveTarget, StandardizedCovariates};
use crate::error::{BrsError, Result};
use crate::nngp::{
    build_graph, conditional_terms, default_psi_bounds, nngp_logdensity, ConditionalTerms,
    NeighborGraph,
};
use crate::rng::stream_rng;
use crate::synthesis::polya_gamma::sample_polya_gamma;

/// Tuning and prior settings shared by both samplers.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub m: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    /// IG(delta/2, xi/2) prior on each tau_j^2.
    pub tau_prior_shape: f64,
    pub tau_prior_scale: f64,
    /// IG prior on sigma^2 (continuous sampler only).
    pub sigma_prior_shape: f64,
    pub sigma_prior_scale: f64,
    /// None derives (0.05 dbar, 2 dbar) from the data.
    pub psi_bounds: Option<(f64, f64)>,
    /// RW-MH proposal sd on log psi.
    pub mh_step: f64,
    /// Adapt mh_step toward 25-45% acceptance during burn-in, then freeze.
    pub adapt_mh: bool,
    /// Keep per-draw beta and f (memory-heavy at large n).
    pub store_latents: bool,
    /// Cooperative wall-clock budget for one run.
    pub max_seconds: Option<f64>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            m: 10,
            n_iter: 2000,
            burn_in: 500,
            tau_prior_shape: 2.0,
            tau_prior_scale: 2.0,
            sigma_prior_shape: 2.0,
            sigma_prior_scale: 2.0,
            psi_bounds: None,
            mh_step: 0.3,
            adapt_mh: true,
            store_latents: false,
            max_seconds: None,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(BrsError::Config(format!(
                "burn_in {} must be < n_iter {}",
                self.burn_in, self.n_iter
            )));
        }
        for (name, v) in [
            ("tau_prior_shape", self.tau_prior_shape),
            ("tau_prior_scale", self.tau_prior_scale),
            ("sigma_prior_shape", self.sigma_prior_shape),
            ("sigma_prior_scale", self.sigma_prior_scale),
            ("mh_step", self.mh_step),
        ] {
            if !(v > 0.0) {
                return Err(BrsError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some((lo, hi)) = self.psi_bounds {
            if !(lo > 0.0 && hi > lo) {
                return Err(BrsError::Config(format!("bad psi bounds ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Prior means for the weight processes: 0 for the intercept, 1/J each
/// for the model weights.
pub fn default_beta_bar(j_models: usize) -> Vec<f64> {
    let mut bb = vec![0.0; j_models + 1];
    for v in bb.iter_mut().skip(1) {
        *v = 1.0 / j_models as f64;
    }
    bb
}

/// Post-burn-in draws. `fitted` rows are the synthesized regression mean
/// (continuous) or linear predictor eta (binary), recomputable exactly as
/// beta_0 + sum_j beta_j f_j from the stored latents.
#[derive(Debug, Clone)]
pub struct SynthesisDraws {
    pub fitted: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub tau2: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub beta: Option<Vec<DMatrix<f64>>>,
    pub f: Option<Vec<DMatrix<f64>>>,
    pub acceptance_rates: Vec<f64>,
}

impl SynthesisDraws {
    pub fn n_retained(&self) -> usize {
        self.fitted.nrows()
    }

    /// Per-draw, per-unit propensities: logistic(eta), clipped.
    pub fn propensity_draws(&self) -> DMatrix<f64> {
        self.fitted.map(|e| clip_propensity(1.0 / (1.0 + (-e).exp())))
    }
}

pub(crate) fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    // 1/X with X ~ Gamma(shape, rate = scale).
    let g = rand_distr::Gamma::new(shape, 1.0 / scale).expect("valid IG parameters");
    1.0 / rng.sample(g)
}

/// Mutable sampler state shared by the continuous and binary cycles. The
/// per-unit likelihood is summarized by weights w_i and linear terms s_i:
/// continuous observed-arm units have (1/sigma^2, y_i/sigma^2), unobserved
/// units (0, 0), and binary units (omega_i, kappa_i).
pub(crate) struct Sampler {
    pub graph: NeighborGraph,
    pub terms: Vec<ConditionalTerms>,
    /// n x (J+1): column 0 is the intercept process.
    pub beta: DMatrix<f64>,
    /// n x J latent agent values.
    pub f: DMatrix<f64>,
    pub tau2: Vec<f64>,
    pub psi: Vec<f64>,
    pub sigma2: f64,
    pub omega: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub agent_mean: DMatrix<f64>,
    pub agent_var: DMatrix<f64>,
    pub psi_bounds: (f64, f64),
    step: Vec<f64>,
    accept: Vec<usize>,
    attempt: Vec<usize>,
    accept_window: Vec<usize>,
    attempt_window: Vec<usize>,
    tau_shape: f64,
    tau_scale: f64,
    sigma_shape: f64,
    sigma_scale: f64,
}

const ADAPT_WINDOW: usize = 50;

impl Sampler {
    pub(crate) fn new(
        xs: &StandardizedCovariates,
        agent: &AgentPredictive,
        config: &SynthesisConfig,
    ) -> Result<Self> {
        config.validate()?;
        agent.validate()?;
        let n = xs.n();
        if agent.means.nrows() != n {
            return Err(BrsError::Validation(format!(
                "agent predictive has {} rows, data has {n}",
                agent.means.nrows()
            )));
        }
        let j = agent.n_models();
        let m = config.m.min(n - 1);
        let graph = build_graph(xs, m)?;
        let psi_bounds = config.psi_bounds.unwrap_or_else(|| default_psi_bounds(xs));
        let psi0 = (psi_bounds.0 * psi_bounds.1).sqrt();
        let terms0 = conditional_terms(&graph, psi0)?;
        let beta_bar = default_beta_bar(j);
        let beta = DMatrix::from_fn(n, j + 1, |_, c| beta_bar[c]);
        Ok(Sampler {
            graph,
            terms: vec![terms0; j + 1],
            beta,
            f: agent.means.clone(),
            tau2: vec![1.0; j + 1],
            psi: vec![psi0; j + 1],
            sigma2: 1.0,
            omega: vec![0.25; n],
            beta_bar,
            agent_mean: agent.means.clone(),
            agent_var: agent.variances.clone(),
            psi_bounds,
            step: vec![config.mh_step; j + 1],
            accept: vec![0; j + 1],
            attempt: vec![0; j + 1],
            accept_window: vec![0; j + 1],
            attempt_window: vec![0; j + 1],
            tau_shape: config.tau_prior_shape,
            tau_scale: config.tau_prior_scale,
            sigma_shape: config.sigma_prior_shape,
            sigma_scale: config.sigma_prior_scale,
        })
    }

    pub(crate) fn n(&self) -> usize {
        self.beta.nrows()
    }

    pub(crate) fn n_models(&self) -> usize {
        self.f.ncols()
    }

    pub(crate) fn eta(&self, i: usize) -> f64 {
        let mut e = self.beta[(i, 0)];
        for j in 0..self.n_models() {
            e += self.beta[(i, j + 1)] * self.f[(i, j)];
        }
        e
    }

    /// Prior-side precision (gamma) and linear term (m) for process j at
    /// unit i, from its own conditional and every conditional it enters
    /// as a neighbor.
    fn prior_terms(&self, i: usize, j: usize) -> (f64, f64) {
        let bb = self.beta_bar[j];
        let terms = &self.terms[j];
        let tau2 = self.tau2[j];
        let own_prec = 1.0 / (tau2 * terms.f[i]);
        let mut dot = 0.0;
        for (slot, &e) in self.graph.neighbors[i].iter().enumerate() {
            dot += terms.b[i][slot] * (self.beta[(e, j)] - bb);
        }
        let mut gamma = own_prec;
        let mut mval = dot * own_prec;
        for &(t, slot) in &self.graph.reverse_index[i] {
            let prec_t = 1.0 / (tau2 * terms.f[t]);
            let bt = terms.b[t][slot];
            let mut resid = self.beta[(t, j)] - bb;
            for (s, &e) in self.graph.neighbors[t].iter().enumerate() {
                if s != slot {
                    resid -= terms.b[t][s] * (self.beta[(e, j)] - bb);
                }
            }
            gamma += bt * bt * prec_t;
            mval += bt * prec_t * resid;
        }
        (gamma, mval)
    }

    /// Gaussian full-conditional moments of the centered (J+1)-vector
    /// beta*_i = beta_i - beta_bar: mean A^{-1}B and covariance A^{-1}.
    pub(crate) fn beta_conditional_moments(
        &self,
        i: usize,
        w: f64,
        s: f64,
    ) -> Result<(DVector<f64>, Cholesky<f64, nalgebra::Dyn>)> {
        let p = self.n_models() + 1;
        let mut fi = DVector::zeros(p);
        fi[0] = 1.0;
        for j in 1..p {
            fi[j] = self.f[(i, j - 1)];
        }
        let fbar: f64 = fi
            .iter()
            .zip(self.beta_bar.iter())
            .map(|(a, b)| a * b)
            .sum();
        let mut a = &fi * fi.transpose() * w;
        let mut bvec = &fi * (s - w * fbar);
        for j in 0..p {
            let (gamma, mval) = self.prior_terms(i, j);
            a[(j, j)] += gamma;
            bvec[j] += mval;
        }
        let chol = Cholesky::new(a.clone()).or_else(|| {
            let mut aj = a;
            for d in 0..p {
                aj[(d, d)] += 1e-10;
            }
            Cholesky::new(aj)
        });
        let chol = chol.ok_or_else(|| BrsError::Numerical(format!(
            "beta conditional precision not positive definite at unit {i}"
        )))?;
        let mean = chol.solve(&bvec);
        Ok((mean, chol))
    }

    pub(crate) fn update_beta(
        &mut self,
        w: &[f64],
        s: &[f64],
        rng: &mut ChaCha8Rng,
        iter: usize,
    ) -> Result<()> {
        let p = self.n_models() + 1;
        for i in 0..self.n() {
            let (mean, chol) = self.beta_conditional_moments(i, w[i], s[i]).map_err(|e| {
                BrsError::SamplerAbort {
                    iteration: iter,
                    block: "beta".into(),
                    message: e.to_string(),
                }
            })?;
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            // x = L^{-T} z has covariance A^{-1}.
            let x = chol
                .l()
                .transpose()
                .solve_upper_triangular(&z)
                .ok_or_else(|| BrsError::SamplerAbort {
                    iteration: iter,
                    block: "beta".into(),
                    message: format!("triangular solve failed at unit {i}"),
                })?;
            for j in 0..p {
                self.beta[(i, j)] = self.beta_bar[j] + mean[j] + x[j];
            }
        }
        Ok(())
    }

    pub(crate) fn update_f(&mut self, w: &[f64], s: &[f64], rng: &mut ChaCha8Rng) {
        for i in 0..self.n() {
            let mut eta = self.eta(i);
            for j in 0..self.n_models() {
                let beta = self.beta[(i, j + 1)];
                let rest = eta - beta * self.f[(i, j)];
                let bv = self.agent_var[(i, j)];
                let av = self.agent_mean[(i, j)];
                let prec = w[i] * beta * beta + 1.0 / bv;
                let lin = beta * (s[i] - w[i] * rest) + av / bv;
                let mean = lin / prec;
                let sd = prec.recip().sqrt();
                let draw = mean + sd * rng.sample::<f64, _>(StandardNormal);
                self.f[(i, j)] = draw;
                eta = rest + beta * draw;
            }
        }
    }

    pub(crate) fn update_tau2(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.n();
        for j in 0..=self.n_models() {
            let bb = self.beta_bar[j];
            let terms = &self.terms[j];
            let mut quad = 0.0;
            for i in 0..n {
                let mut resid = self.beta[(i, j)] - bb;
                for (slot, &e) in self.graph.neighbors[i].iter().enumerate() {
                    resid -= terms.b[i][slot] * (self.beta[(e, j)] - bb);
                }
                quad += resid * resid / terms.f[i];
            }
            let shape = (self.tau_shape + n as f64) / 2.0;
            let scale = self.tau_scale / 2.0 + quad / 2.0;
            self.tau2[j] = sample_inverse_gamma(shape, scale, rng);
        }
    }

    pub(crate) fn update_sigma2(
        &mut self,
        y: &DVector<f64>,
        observed: &[bool],
        rng: &mut ChaCha8Rng,
    ) {
        let mut rss = 0.0;
        let mut n_obs = 0usize;
        for i in 0..self.n() {
            if observed[i] {
                let r = y[i] - self.eta(i);
                rss += r * r;
                n_obs += 1;
            }
        }
        let shape = (self.sigma_shape + n_obs as f64) / 2.0;
        let scale = self.sigma_scale / 2.0 + rss / 2.0;
        self.sigma2 = sample_inverse_gamma(shape, scale, rng);
    }

    pub(crate) fn update_omega(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        for i in 0..self.n() {
            self.omega[i] = sample_polya_gamma(self.eta(i), rng)?;
        }
        Ok(())
    }

    pub(crate) fn update_psi(&mut self, rng: &mut ChaCha8Rng, adapt: bool) -> Result<()> {
        let n = self.n();
        for j in 0..=self.n_models() {
            self.attempt[j] += 1;
            self.attempt_window[j] += 1;
            let cur = self.psi[j];
            let prop = (cur.ln() + self.step[j] * rng.sample::<f64, _>(StandardNormal)).exp();
            let mut accepted = false;
            if prop >= self.psi_bounds.0 && prop <= self.psi_bounds.1 {
                let beta_j: Vec<f64> = (0..n).map(|i| self.beta[(i, j)]).collect();
                let new_terms = conditional_terms(&self.graph, prop)?;
                let ld_new =
                    nngp_logdensity(&beta_j, self.beta_bar[j], self.tau2[j], &new_terms, &self.graph);
                let ld_old = nngp_logdensity(
                    &beta_j,
                    self.beta_bar[j],
                    self.tau2[j],
                    &self.terms[j],
                    &self.graph,
                );
                // Uniform prior; log-normal proposal contributes the Jacobian.
                let log_alpha = ld_new - ld_old + prop.ln() - cur.ln();
                if rng.gen::<f64>().ln() < log_alpha {
                    self.psi[j] = prop;
                    self.terms[j] = new_terms;
                    accepted = true;
                }
            }
            if accepted {
                self.accept[j] += 1;
                self.accept_window[j] += 1;
            }
            if adapt && self.attempt_window[j] >= ADAPT_WINDOW {
                let rate = self.accept_window[j] as f64 / self.attempt_window[j] as f64;
                if rate < 0.25 {
                    self.step[j] = (self.step[j] * 0.8).max(1e-3);
                } else if rate > 0.45 {
                    self.step[j] = (self.step[j] * 1.25).min(10.0);
                }
                self.accept_window[j] = 0;
                self.attempt_window[j] = 0;
            }
        }
        Ok(())
    }

    pub(crate) fn acceptance_rates(&self) -> Vec<f64> {
        self.accept
            .iter()
            .zip(self.attempt.iter())
            .map(|(&a, &t)| if t == 0 { 0.0 } else { a as f64 / t as f64 })
            .collect()
    }

    fn check_finite(&self, iter: usize, block: &str) -> Result<()> {
        let bad = self.beta.iter().any(|v| !v.is_finite())
            || self.f.iter().any(|v| !v.is_finite())
            || !self.sigma2.is_finite()
            || self.tau2.iter().any(|v| !v.is_finite());
        if bad {
            return Err(BrsError::SamplerAbort {
                iteration: iter,
                block: block.into(),
                message: "non-finite state".into(),
            });
        }
        Ok(())
    }

    pub(crate) fn sweep_continuous(
        &mut self,
        y: &DVector<f64>,
        observed: &[bool],
        rng: &mut ChaCha8Rng,
        adapt: bool,
        iter: usize,
    ) -> Result<()> {
        let inv_s2 = 1.0 / self.sigma2;
        let w: Vec<f64> = observed.iter().map(|&o| if o { inv_s2 } else { 0.0 }).collect();
        let s: Vec<f64> = (0..self.n())
            .map(|i| if observed[i] { y[i] * inv_s2 } else { 0.0 })
            .collect();
        self.update_beta(&w, &s, rng, iter)?;
        self.update_f(&w, &s, rng);
        self.update_tau2(rng);
        self.update_psi(rng, adapt)?;
        self.update_sigma2(y, observed, rng);
        self.check_finite(iter, "continuous sweep")
    }

    pub(crate) fn sweep_binary(
        &mut self,
        z: &[u8],
        rng: &mut ChaCha8Rng,
        adapt: bool,
        iter: usize,
    ) -> Result<()> {
        let w = self.omega.clone();
        let s: Vec<f64> = z.iter().map(|&zi| f64::from(zi) - 0.5).collect();
        self.update_beta(&w, &s, rng, iter)?;
        self.update_omega(rng)?;
        self.update_f(&self.omega.clone(), &s, rng);
        self.update_tau2(rng);
        self.update_psi(rng, adapt)?;
        self.check_finite(iter, "binary sweep")
    }
}

struct DrawStore {
    fitted: Vec<f64>,
    sigma2: Vec<f64>,
    tau2: Vec<f64>,
    psi: Vec<f64>,
    beta: Option<Vec<DMatrix<f64>>>,
    f: Option<Vec<DMatrix<f64>>>,
    n: usize,
    p: usize,
}

impl DrawStore {
    fn new(retained: usize, n: usize, p: usize, store_latents: bool, keep_sigma: bool) -> Self {
        DrawStore {
            fitted: Vec::with_capacity(retained * n),
            sigma2: if keep_sigma { Vec::with_capacity(retained) } else { Vec::new() },
            tau2: Vec::with_capacity(retained * p),
            psi: Vec::with_capacity(retained * p),
            beta: store_latents.then(|| Vec::with_capacity(retained)),
            f: store_latents.then(|| Vec::with_capacity(retained)),
            n,
            p,
        }
    }

    fn push(&mut self, sampler: &Sampler, keep_sigma: bool) {
        for i in 0..self.n {
            self.fitted.push(sampler.eta(i));
        }
        if keep_sigma {
            self.sigma2.push(sampler.sigma2);
        }
        self.tau2.extend_from_slice(&sampler.tau2);
        self.psi.extend_from_slice(&sampler.psi);
        if let Some(b) = &mut self.beta {
            b.push(sampler.beta.clone());
        }
        if let Some(f) = &mut self.f {
            f.push(sampler.f.clone());
        }
    }

    fn finish(self, sampler: &Sampler) -> SynthesisDraws {
        let rows = self.fitted.len() / self.n;
        SynthesisDraws {
            fitted: DMatrix::from_row_slice(rows, self.n, &self.fitted),
            sigma2: self.sigma2,
            tau2: DMatrix::from_row_slice(rows, self.p, &self.tau2),
            psi: DMatrix::from_row_slice(rows, self.p, &self.psi),
            beta: self.beta,
            f: self.f,
            acceptance_rates: sampler.acceptance_rates(),
        }
    }
}

fn check_deadline(start: Instant, config: &SynthesisConfig) -> Result<()> {
    if let Some(max) = config.max_seconds {
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed > max {
            return Err(BrsError::Timeout(max));
        }
    }
    Ok(())
}

/// Synthesize one outcome arm. The likelihood uses only observed-arm
/// units; the NNGP prior propagates beta and the agent priors propagate f
/// to every unit, so the fitted mean is defined at all n covariate rows.
pub fn run_continuous_gibbs(
    y: &DVector<f64>,
    observed: &[bool],
    agent: &AgentPredictive,
    xs: &StandardizedCovariates,
    config: &SynthesisConfig,
) -> Result<SynthesisDraws> {
    if agent.target == PredictiveTarget::Propensity {
        return Err(BrsError::Contract(
            "continuous sampler requires an outcome-arm predictive".into(),
        ));
    }
    let n = xs.n();
    if y.len() != n || observed.len() != n {
        return Err(BrsError::Validation("y/observed length mismatch".into()));
    }
    if !observed.iter().any(|&o| o) {
        return Err(BrsError::Validation("no observed units in this arm".into()));
    }
    let mut sampler = Sampler::new(xs, agent, config)?;
    let mut rng = stream_rng(config.seed, "synthesis/continuous");
    let retained = config.n_iter - config.burn_in;
    let mut store = DrawStore::new(retained, n, sampler.n_models() + 1, config.store_latents, true);
    let start = Instant::now();
    for iter in 0..config.n_iter {
        let adapt = config.adapt_mh && iter < config.burn_in;
        sampler.sweep_continuous(y, observed, &mut rng, adapt, iter)?;
        if iter >= config.burn_in {
            store.push(&sampler, true);
        }
        if iter % 32 == 0 {
            check_deadline(start, config)?;
        }
    }
    Ok(store.finish(&sampler))
}

/// Synthesize the propensity via Polya-Gamma augmentation. `fitted` draws
/// are the linear predictor eta; map with `propensity_draws` for clipped
/// probabilities.
pub fn run_binary_gibbs(
    z: &[u8],
    agent: &AgentPredictive,
    xs: &StandardizedCovariates,
    config: &SynthesisConfig,
) -> Result<SynthesisDraws> {
    if agent.target != PredictiveTarget::Propensity {
        return Err(BrsError::Contract(
            "binary sampler requires a propensity predictive".into(),
        ));
    }
    let n = xs.n();
    if z.len() != n {
        return Err(BrsError::Validation("z length mismatch".into()));
    }
    let ones = z.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(BrsError::Validation("both classes must be present".into()));
    }
    let mut sampler = Sampler::new(xs, agent, config)?;
    let mut rng = stream_rng(config.seed, "synthesis/binary");
    let retained = config.n_iter - config.burn_in;
    let mut store = DrawStore::new(retained, n, sampler.n_models() + 1, config.store_latents, false);
    let start = Instant::now();
    for iter in 0..config.n_iter {
        let adapt = config.adapt_mh && iter < config.burn_in;
        sampler.sweep_binary(z, &mut rng, adapt, iter)?;
        if iter >= config.burn_in {
            store.push(&sampler, false);
        }
        if iter % 32 == 0 {
            check_deadline(start, config)?;
        }
    }
    Ok(store.finish(&sampler))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::standardize_matrix;
    use crate::nngp::sample_prior;
    use crate::synthesis::diagnostics::ks_two_sample;
    use approx::assert_relative_eq;

    fn toy_xs(n: usize, q: usize, seed: u64) -> StandardizedCovariates {
        let mut rng = crate::rng::stream_rng(seed, "test/synth/x");
        standardize_matrix(&DMatrix::from_fn(n, q, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    fn outcome_agent(n: usize, j: usize, mean: f64, var: f64) -> AgentPredictive {
        AgentPredictive {
            target: PredictiveTarget::OutcomeTreated,
            means: DMatrix::from_element(n, j, mean),
            variances: DMatrix::from_element(n, j, var),
            model_labels: (0..j).map(|k| format!("m{k}")).collect(),
        }
    }

    fn propensity_agent(n: usize, j: usize, mean: f64, var: f64) -> AgentPredictive {
        AgentPredictive {
            target: PredictiveTarget::Propensity,
            means: DMatrix::from_element(n, j, mean),
            variances: DMatrix::from_element(n, j, var),
            model_labels: (0..j).map(|k| format!("m{k}")).collect(),
        }
    }

    fn small_config(n_iter: usize, burn_in: usize, seed: u64) -> SynthesisConfig {
        SynthesisConfig {
            m: 5,
            n_iter,
            burn_in,
            seed,
            store_latents: true,
            ..SynthesisConfig::default()
        }
    }

    #[test]
    fn beta_bar_defaults() {
        assert_eq!(default_beta_bar(3), vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let bb = default_beta_bar(2);
        assert_eq!(bb[0], 0.0);
        assert_relative_eq!(bb.iter().skip(1).sum::<f64>(), 1.0);
    }

    #[test]
    fn retained_draw_count_and_identity() {
        let n = 40;
        let xs = toy_xs(n, 2, 1);
        let agent = outcome_agent(n, 2, 1.0, 0.5);
        let mut rng = crate::rng::stream_rng(2, "test/synth/y");
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) + 1.0);
        let observed = vec![true; n];
        let cfg = small_config(120, 40, 3);
        let draws = run_continuous_gibbs(&y, &observed, &agent, &xs, &cfg).unwrap();
        assert_eq!(draws.n_retained(), 80);
        // fitted recomputation identity against stored latents.
        let betas = draws.beta.as_ref().unwrap();
        let fs = draws.f.as_ref().unwrap();
        for b in 0..draws.n_retained() {
            for i in 0..n {
                let mut eta = betas[b][(i, 0)];
                for j in 0..2 {
                    eta += betas[b][(i, j + 1)] * fs[b][(i, j)];
                }
                assert_eq!(eta, draws.fitted[(b, i)]);
            }
        }
        // psi draws inside bounds; variance draws positive.
        let (lo, hi) = crate::nngp::default_psi_bounds(&xs);
        for v in draws.psi.iter() {
            assert!(*v >= lo && *v <= hi);
        }
        assert!(draws.sigma2.iter().all(|&v| v > 0.0));
        assert!(draws.tau2.iter().all(|&v| v > 0.0));
        assert_eq!(draws.acceptance_rates.len(), 3);
    }

    // Single-site f conditional, hand case: beta = 1, sigma2 = 1, prior
    // N(0, 1), residual 2 -> posterior N(1, 1/2).
    #[test]
    fn f_update_conjugate_hand_case() {
        let n = 4;
        let xs = toy_xs(n, 1, 5);
        let agent = outcome_agent(n, 1, 0.0, 1.0);
        let cfg = small_config(10, 5, 7);
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        // Pin beta: intercept 0, weight 1.
        for i in 0..n {
            sampler.beta[(i, 0)] = 0.0;
            sampler.beta[(i, 1)] = 1.0;
        }
        sampler.sigma2 = 1.0;
        let w = vec![1.0; n];
        let s = vec![2.0; n]; // y_i = 2, so residual r = 2 at f's conditional
        let mut rng = crate::rng::stream_rng(11, "test/synth/fdraw");
        let reps = 100_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..reps {
            sampler.update_f(&w, &s, &mut rng);
            let v = sampler.f[(0, 0)];
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / reps as f64;
        let var = acc2 / reps as f64 - mean * mean;
        // 3 MC se of the mean: 3 sqrt(0.5/1e5) ~ 0.0067.
        assert!((mean - 1.0).abs() < 0.0067, "mean = {mean}");
        assert!((var - 0.5).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn f_update_zero_weight_returns_prior() {
        let n = 4;
        let xs = toy_xs(n, 1, 13);
        let agent = outcome_agent(n, 1, 2.5, 0.49);
        let cfg = small_config(10, 5, 17);
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        for i in 0..n {
            sampler.beta[(i, 1)] = 0.0; // zero weight
        }
        let w = vec![1.0; n];
        let s = vec![5.0; n];
        let mut rng = crate::rng::stream_rng(19, "test/synth/fprior");
        let reps = 50_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..reps {
            sampler.update_f(&w, &s, &mut rng);
            let v = sampler.f[(1, 0)];
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / reps as f64;
        let var = acc2 / reps as f64 - mean * mean;
        assert!((mean - 2.5).abs() < 0.01, "mean = {mean}");
        assert!((var - 0.49).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn f_update_degenerate_prior_pins_at_agent_mean() {
        let n = 4;
        let xs = toy_xs(n, 1, 23);
        let agent = outcome_agent(n, 1, 1.7, 1e-14);
        let cfg = small_config(10, 5, 29);
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        let w = vec![1.0; n];
        let s = vec![-3.0; n];
        let mut rng = crate::rng::stream_rng(31, "test/synth/fpin");
        sampler.update_f(&w, &s, &mut rng);
        for i in 0..n {
            assert!((sampler.f[(i, 0)] - 1.7).abs() < 1e-6);
        }
    }

    // With beta pinned at beta_bar the tau2 conditional is IG((d+n)/2, x/2);
    // and the IG sampler's mean matches scale/(shape-1).
    #[test]
    fn tau2_zero_quadratic_form_and_ig_moment() {
        let n = 6;
        let xs = toy_xs(n, 1, 37);
        let agent = outcome_agent(n, 1, 0.0, 1.0);
        let cfg = small_config(10, 5, 41);
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        // beta == beta_bar already (initialization); expected IG(4, 1).
        let mut rng = crate::rng::stream_rng(43, "test/synth/tau");
        let reps = 100_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            sampler.update_tau2(&mut rng);
            acc += sampler.tau2[0];
        }
        let mean = acc / reps as f64;
        // IG((2+6)/2, 2/2) = IG(4, 1): mean = 1/3, sd = 1/(3 sqrt(2)).
        let se = 1.0 / (3.0 * 2.0f64.sqrt()) / (reps as f64).sqrt();
        assert!((mean - 1.0 / 3.0).abs() < 4.0 * se + 1e-3, "mean = {mean}");

        // Direct IG(2, 2) draws: sample mean near scale/(shape-1) = 2.
        let mut rng2 = crate::rng::stream_rng(47, "test/synth/ig22");
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_inverse_gamma(2.0, 2.0, &mut rng2))
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        let se = sd / (draws.len() as f64).sqrt();
        // IG(2,2) has infinite variance; the empirical-se band is loose.
        assert!((m - 2.0).abs() < 3.0 * se + 0.05, "mean = {m}, se = {se}");
    }

    #[test]
    fn sigma2_perfect_fit_reduces_to_prior_ig() {
        let n = 8;
        let xs = toy_xs(n, 1, 53);
        let agent = outcome_agent(n, 1, 0.0, 1.0);
        let cfg = small_config(10, 5, 59);
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        // y exactly equals the current fitted mean: zero RSS.
        let y = DVector::from_fn(n, |i, _| sampler.eta(i));
        let observed = vec![true; n];
        let mut rng = crate::rng::stream_rng(61, "test/synth/sig");
        let reps = 100_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            sampler.update_sigma2(&y, &observed, &mut rng);
            acc += sampler.sigma2;
        }
        // IG((2+8)/2, 1) = IG(5, 1): mean 1/4.
        let mean = acc / reps as f64;
        assert!((mean - 0.25).abs() < 0.005, "mean = {mean}");
    }

    // Dense-Gaussian oracle for the per-unit beta conditional: with
    // m = n-1 the NNGP prior is the dense MVN, so the conditional of
    // beta_i given the rest is available in closed form.
    #[test]
    fn beta_conditional_matches_dense_oracle() {
        let n = 6;
        let xs = toy_xs(n, 2, 67);
        let agent = outcome_agent(n, 0, 0.0, 1.0); // J = 0: intercept only
        let cfg = SynthesisConfig {
            m: n - 1,
            n_iter: 10,
            burn_in: 5,
            seed: 71,
            ..SynthesisConfig::default()
        };
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        let mut rng = crate::rng::stream_rng(73, "test/synth/betadense");
        // Scatter beta so the conditional mean is non-trivial.
        for i in 0..n {
            sampler.beta[(i, 0)] = rng.sample::<f64, _>(StandardNormal);
        }
        sampler.tau2[0] = 1.7;
        let psi = sampler.psi[0];
        let tau2 = sampler.tau2[0];
        // Dense precision of the joint prior.
        let mut c = DMatrix::from_fn(n, n, |a, b| {
            let mut d = 0.0;
            for col in 0..xs.values.ncols() {
                let dd = xs.values[(a, col)] - xs.values[(b, col)];
                d += dd * dd;
            }
            crate::nngp::kernel_corr(d.sqrt(), psi)
        });
        for d in 0..n {
            c[(d, d)] += 1e-12;
        }
        let prec = (c * tau2).try_inverse().unwrap();
        let w = 0.8;
        let s = 1.3;
        for i in 0..n {
            let (mean, chol) = sampler.beta_conditional_moments(i, w, s).unwrap();
            let var = chol.inverse()[(0, 0)];
            // Oracle: precision = w + prec_ii, mean solves the conditional.
            let prec_ii = prec[(i, i)];
            let mut cross = 0.0;
            for k in 0..n {
                if k != i {
                    cross += prec[(i, k)] * sampler.beta[(k, 0)];
                }
            }
            let a_or = w + prec_ii;
            let b_or = s - cross;
            assert!((var - 1.0 / a_or).abs() < 1e-7, "unit {i}: var {var} vs {}", 1.0 / a_or);
            assert!(
                (mean[0] - b_or / a_or).abs() < 1e-7,
                "unit {i}: mean {} vs {}",
                mean[0],
                b_or / a_or
            );
        }
    }

    // No likelihood (w = 0): Gibbs over the beta conditionals targets the
    // NNGP prior itself. Compare thinned chain draws at a probe unit with
    // iid prior draws.
    #[test]
    fn beta_update_without_likelihood_samples_the_prior() {
        let n = 20;
        let xs = toy_xs(n, 2, 79);
        let agent = outcome_agent(n, 0, 0.0, 1.0);
        let cfg = SynthesisConfig {
            m: 5,
            n_iter: 10,
            burn_in: 5,
            seed: 83,
            ..SynthesisConfig::default()
        };
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        sampler.tau2[0] = 1.3;
        let w = vec![0.0; n];
        let s = vec![0.0; n];
        let mut rng = crate::rng::stream_rng(89, "test/synth/priorks");
        let probe = 7usize;
        let mut chain = Vec::new();
        for sweep in 0..20_000 {
            sampler.update_beta(&w, &s, &mut rng, sweep).unwrap();
            if sweep % 10 == 0 {
                chain.push(sampler.beta[(probe, 0)]);
            }
        }
        let terms = conditional_terms(&sampler.graph, sampler.psi[0]).unwrap();
        let iid: Vec<f64> = (0..10_000)
            .map(|_| sample_prior(0.0, 1.3, &terms, &sampler.graph, &mut rng)[probe])
            .collect();
        let p = ks_two_sample(&chain, &iid);
        assert!(p > 0.01, "KS p = {p}");
    }

    // Flat target: with tau2 enormous the psi density barely changes, so
    // in-bounds proposals are almost always accepted.
    #[test]
    fn psi_update_flat_target_and_bounds() {
        let n = 30;
        let xs = toy_xs(n, 2, 97);
        let agent = outcome_agent(n, 1, 0.0, 1.0);
        let cfg = SynthesisConfig {
            m: 5,
            n_iter: 10,
            burn_in: 5,
            seed: 101,
            mh_step: 0.01,
            adapt_mh: false,
            ..SynthesisConfig::default()
        };
        let mut sampler = Sampler::new(&xs, &agent, &cfg).unwrap();
        for t in sampler.tau2.iter_mut() {
            *t = 1e10;
        }
        let mut rng = crate::rng::stream_rng(103, "test/synth/psiflat");
        for _ in 0..400 {
            sampler.update_psi(&mut rng, false).unwrap();
        }
        let rates = sampler.acceptance_rates();
        for (j, r) in rates.iter().enumerate() {
            assert!(*r > 0.9, "process {j}: rate {r}");
        }
        let (lo, hi) = sampler.psi_bounds;
        for &p in &sampler.psi {
            assert!(p >= lo && p <= hi);
        }
    }

    // Degenerate limit: agents pinned (b tiny) and tau2 pinned tiny leave
    // sigma2 to absorb the residual variance of y - f.
    #[test]
    fn continuous_degenerate_sigma2_recovers_residual_variance() {
        let n = 300;
        let xs = toy_xs(n, 2, 107);
        let mut agent = outcome_agent(n, 1, 0.0, 1e-12);
        let mut rng = crate::rng::stream_rng(109, "test/synth/degen");
        for i in 0..n {
            agent.means[(i, 0)] = rng.sample::<f64, _>(StandardNormal);
        }
        let true_sigma = 2.0;
        let y = DVector::from_fn(n, |i, _| {
            agent.means[(i, 0)] + true_sigma * rng.sample::<f64, _>(StandardNormal)
        });
        let cfg = SynthesisConfig {
            m: 5,
            n_iter: 600,
            burn_in: 200,
            // Pin tau2 near 1e-4 with an overwhelming prior.
            tau_prior_shape: 1e8,
            tau_prior_scale: 1e4,
            seed: 113,
            ..SynthesisConfig::default()
        };
        let observed = vec![true; n];
        let draws = run_continuous_gibbs(&y, &observed, &agent, &xs, &cfg).unwrap();
        let mean_s2 = draws.sigma2.iter().sum::<f64>() / draws.sigma2.len() as f64;
        let target = true_sigma * true_sigma;
        assert!(
            (mean_s2 - target).abs() < 0.1 * target,
            "posterior mean sigma2 = {mean_s2}"
        );
    }

    // Self-consistency: data generated from the synthesis model itself;
    // posterior beta(X_i) should cover the truth for most units.
    #[test]
    fn continuous_self_consistency_beta_recovery() {
        let n = 200;
        let j = 2;
        let xs = toy_xs(n, 2, 127);
        let mut rng = crate::rng::stream_rng(131, "test/synth/selfgen");
        let graph = build_graph(&xs, 10).unwrap();
        let (lo, hi) = default_psi_bounds(&xs);
        let psi_true = (lo * hi).sqrt();
        let terms = conditional_terms(&graph, psi_true).unwrap();
        let bb = default_beta_bar(j);
        let mut beta_true = DMatrix::zeros(n, j + 1);
        for p in 0..=j {
            let draw = sample_prior(bb[p], 0.25, &terms, &graph, &mut rng);
            for i in 0..n {
                beta_true[(i, p)] = draw[i];
            }
        }
        let mut agent = outcome_agent(n, j, 0.0, 1.0);
        for i in 0..n {
            for k in 0..j {
                agent.means[(i, k)] = rng.sample::<f64, _>(StandardNormal) * 2.0;
            }
        }
        let mut f_true = DMatrix::zeros(n, j);
        for i in 0..n {
            for k in 0..j {
                f_true[(i, k)] =
                    agent.means[(i, k)] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        let sigma_true = 0.5;
        let y = DVector::from_fn(n, |i, _| {
            let mut eta = beta_true[(i, 0)];
            for k in 0..j {
                eta += beta_true[(i, k + 1)] * f_true[(i, k)];
            }
            eta + sigma_true * rng.sample::<f64, _>(StandardNormal)
        });
        let cfg = SynthesisConfig {
            m: 10,
            n_iter: 1500,
            burn_in: 500,
            seed: 137,
            store_latents: true,
            ..SynthesisConfig::default()
        };
        let observed = vec![true; n];
        let draws = run_continuous_gibbs(&y, &observed, &agent, &xs, &cfg).unwrap();
        let betas = draws.beta.as_ref().unwrap();
        let b = betas.len();
        let mut covered = 0usize;
        let mut total = 0usize;
        for p in 0..=j {
            for i in 0..n {
                let vals: Vec<f64> = betas.iter().map(|m| m[(i, p)]).collect();
                let mean = vals.iter().sum::<f64>() / b as f64;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (b - 1) as f64)
                    .sqrt();
                if (beta_true[(i, p)] - mean).abs() <= 3.0 * sd {
                    covered += 1;
                }
                total += 1;
            }
        }
        let frac = covered as f64 / total as f64;
        assert!(frac >= 0.9, "coverage fraction = {frac}");
    }

    #[test]
    fn binary_symmetric_data_centers_propensity() {
        let n = 500;
        let xs = toy_xs(n, 2, 139);
        let agent = propensity_agent(n, 2, 0.5, 1e-10);
        let mut z = vec![0u8; n];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = u8::from(i % 2 == 0);
        }
        let cfg = SynthesisConfig {
            m: 10,
            n_iter: 2500,
            burn_in: 500,
            seed: 149,
            ..SynthesisConfig::default()
        };
        let draws = run_binary_gibbs(&z, &agent, &xs, &cfg).unwrap();
        assert_eq!(draws.n_retained(), 2000);
        let pi = draws.propensity_draws();
        // With unit-scale tau2 priors the weight field retains some local
        // wiggle on pure coin-flip data; demand centering overall and for
        // the bulk of units rather than a uniform 0.1 band.
        let devs: Vec<f64> = (0..n)
            .map(|i| (pi.column(i).sum() / pi.nrows() as f64 - 0.5).abs())
            .collect();
        let overall: f64 = devs.iter().sum::<f64>() / n as f64;
        let within = devs.iter().filter(|d| **d < 0.125).count();
        let max = devs.iter().cloned().fold(0.0, f64::max);
        assert!(overall < 0.08, "mean |pi - 0.5| = {overall}");
        assert!(within as f64 >= 0.85 * n as f64, "only {within}/{n} units within 0.125");
        assert!(max < 0.25, "max deviation = {max}");
    }

    // Self-consistency for the binary sampler: 90% credible intervals for
    // eta should cover the true linear predictor for most units.
    #[test]
    fn binary_self_consistency_eta_coverage() {
        let n = 500;
        let j = 2;
        let xs = toy_xs(n, 2, 151);
        let mut rng = crate::rng::stream_rng(157, "test/synth/bingen");
        let graph = build_graph(&xs, 10).unwrap();
        let (lo, hi) = default_psi_bounds(&xs);
        let terms = conditional_terms(&graph, (lo * hi).sqrt()).unwrap();
        let bb = default_beta_bar(j);
        let mut beta_true = DMatrix::zeros(n, j + 1);
        for p in 0..=j {
            let draw = sample_prior(bb[p], 0.25, &terms, &graph, &mut rng);
            for i in 0..n {
                beta_true[(i, p)] = draw[i];
            }
        }
        let mut agent = propensity_agent(n, j, 0.5, 0.01);
        for i in 0..n {
            for k in 0..j {
                agent.means[(i, k)] = 0.2 + 0.6 * rng.gen::<f64>();
            }
        }
        let mut eta_true = vec![0.0; n];
        let mut z = vec![0u8; n];
        for i in 0..n {
            let mut eta = beta_true[(i, 0)];
            for k in 0..j {
                let f = agent.means[(i, k)] + 0.1 * rng.sample::<f64, _>(StandardNormal);
                eta += beta_true[(i, k + 1)] * f;
            }
            eta_true[i] = eta;
            z[i] = u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        }
        if z.iter().all(|&v| v == 0) || z.iter().all(|&v| v == 1) {
            panic!("degenerate simulated treatment vector");
        }
        let cfg = SynthesisConfig {
            m: 10,
            n_iter: 1500,
            burn_in: 500,
            seed: 163,
            ..SynthesisConfig::default()
        };
        let draws = run_binary_gibbs(&z, &agent, &xs, &cfg).unwrap();
        let b = draws.n_retained();
        let mut covered = 0usize;
        for i in 0..n {
            let mut vals: Vec<f64> = (0..b).map(|r| draws.fitted[(r, i)]).collect();
            vals.sort_by(|a, c| a.partial_cmp(c).unwrap());
            let lo_q = vals[(0.05 * b as f64) as usize];
            let hi_q = vals[((0.95 * b as f64) as usize).min(b - 1)];
            if eta_true[i] >= lo_q && eta_true[i] <= hi_q {
                covered += 1;
            }
        }
        let frac = covered as f64 / n as f64;
        assert!((0.8..=0.98).contains(&frac), "eta coverage = {frac}");
    }

    #[test]
    fn wrong_target_is_a_contract_error() {
        let n = 20;
        let xs = toy_xs(n, 2, 167);
        let prop = propensity_agent(n, 1, 0.5, 0.01);
        let y = DVector::zeros(n);
        let observed = vec![true; n];
        let cfg = small_config(20, 10, 173);
        assert!(matches!(
            run_continuous_gibbs(&y, &observed, &prop, &xs, &cfg),
            Err(BrsError::Contract(_))
        ));
        let out = outcome_agent(n, 1, 0.0, 1.0);
        let z = vec![0u8, 1].repeat(10);
        assert!(matches!(
            run_binary_gibbs(&z, &out, &xs, &cfg),
            Err(BrsError::Contract(_))
        ));
    }

    #[test]
    fn timeout_aborts_cooperatively() {
        let n = 200;
        let xs = toy_xs(n, 2, 179);
        let agent = outcome_agent(n, 2, 0.0, 1.0);
        let y = DVector::zeros(n);
        let observed = vec![true; n];
        let cfg = SynthesisConfig {
            n_iter: 100_000,
            burn_in: 50_000,
            max_seconds: Some(0.05),
            seed: 181,
            ..SynthesisConfig::default()
        };
        assert!(matches!(
            run_continuous_gibbs(&y, &observed, &agent, &xs, &cfg),
            Err(BrsError::Timeout(_))
        ));
    }
}
