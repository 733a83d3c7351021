//! Getting-it-right (Geweke) checks: forward simulation from the prior
//! versus successive-conditional simulation (one Gibbs sweep, then
//! regenerate data) must agree in distribution if the sampler targets the
//! stated joint model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datamodel::{standardize_matrix, AgentPredictive, PredictiveTarget, StandardizedCovariates};
use crate::error::Result;
use crate::nngp::{conditional_terms, sample_prior};
use crate::rng::stream_rng;
use crate::synthesis::diagnostics::geweke_z;
use crate::synthesis::polya_gamma::sample_polya_gamma;
use crate::synthesis::{sample_inverse_gamma, Sampler, SynthesisConfig};

#[derive(Debug, Clone, Copy)]
pub struct GewekeConfig {
    pub n: usize,
    pub j: usize,
    pub m: usize,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            n: 20,
            j: 2,
            m: 5,
            sweeps: 10_000,
            seed: 424242,
        }
    }
}

#[derive(Debug)]
pub struct GewekeReport {
    /// (functional label, z-score) pairs.
    pub zs: Vec<(String, f64)>,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.zs.iter().map(|(_, z)| z.abs()).fold(0.0, f64::max)
    }
}

/// IG(6, 6) hyperparameters: heavier shapes than the runtime default so
/// the compared functionals have finite fourth moments.
const GEWEKE_SHAPE: f64 = 12.0;
const GEWEKE_SCALE: f64 = 12.0;

struct Fixture {
    xs: StandardizedCovariates,
    agent: AgentPredictive,
    synth: SynthesisConfig,
    probes: [usize; 3],
}

fn fixture(cfg: &GewekeConfig, target: PredictiveTarget) -> Fixture {
    let mut rng = stream_rng(cfg.seed, "geweke/fixture");
    let x = DMatrix::from_fn(cfg.n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let xs = standardize_matrix(&x);
    let means = DMatrix::from_fn(cfg.n, cfg.j, |_, _| {
        if target == PredictiveTarget::Propensity {
            0.2 + 0.6 * rng.gen::<f64>()
        } else {
            rng.sample::<f64, _>(StandardNormal)
        }
    });
    let agent = AgentPredictive {
        target,
        means,
        variances: DMatrix::from_element(cfg.n, cfg.j, 0.25),
        model_labels: (0..cfg.j).map(|k| format!("m{k}")).collect(),
    };
    let synth = SynthesisConfig {
        m: cfg.m,
        n_iter: 10,
        burn_in: 5,
        tau_prior_shape: GEWEKE_SHAPE,
        tau_prior_scale: GEWEKE_SCALE,
        sigma_prior_shape: GEWEKE_SHAPE,
        sigma_prior_scale: GEWEKE_SCALE,
        adapt_mh: false,
        seed: cfg.seed,
        ..SynthesisConfig::default()
    };
    let probes = [0, cfg.n / 2, cfg.n - 1];
    Fixture { xs, agent, synth, probes }
}

/// Draw (theta, Phi) from the prior and overwrite the sampler state.
fn forward_draw<R: Rng>(sampler: &mut Sampler, rng: &mut R) -> Result<()> {
    let n = sampler.n();
    let j = sampler.n_models();
    let (lo, hi) = sampler.psi_bounds;
    for p in 0..=j {
        sampler.tau2[p] = sample_inverse_gamma(GEWEKE_SHAPE / 2.0, GEWEKE_SCALE / 2.0, rng);
        sampler.psi[p] = lo + (hi - lo) * rng.gen::<f64>();
        sampler.terms[p] = conditional_terms(&sampler.graph, sampler.psi[p])?;
        let draw = sample_prior(
            sampler.beta_bar[p],
            sampler.tau2[p],
            &sampler.terms[p],
            &sampler.graph,
            rng,
        );
        for i in 0..n {
            sampler.beta[(i, p)] = draw[i];
        }
    }
    sampler.sigma2 = sample_inverse_gamma(GEWEKE_SHAPE / 2.0, GEWEKE_SCALE / 2.0, rng);
    for i in 0..n {
        for k in 0..j {
            sampler.f[(i, k)] = sampler.agent_mean[(i, k)]
                + sampler.agent_var[(i, k)].sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(())
}

fn record(sampler: &Sampler, probes: &[usize; 3], with_sigma: bool, out: &mut Vec<Vec<f64>>) {
    let mut row = Vec::new();
    if with_sigma {
        row.push(sampler.sigma2);
    }
    row.push(sampler.tau2[0]);
    for &i in probes {
        row.push(sampler.beta[(i, 0)]);
    }
    row.push(sampler.beta[(probes[1], 1)]);
    for (slot, v) in row.into_iter().enumerate() {
        out[slot].push(v);
    }
}

fn labels(with_sigma: bool) -> Vec<String> {
    let mut l = Vec::new();
    if with_sigma {
        l.push("sigma2".into());
    }
    l.push("tau2[0]".into());
    l.push("beta0[probe1]".into());
    l.push("beta0[probe2]".into());
    l.push("beta0[probe3]".into());
    l.push("beta1[probe2]".into());
    l
}

fn run(cfg: &GewekeConfig, binary: bool) -> Result<GewekeReport> {
    let target = if binary {
        PredictiveTarget::Propensity
    } else {
        PredictiveTarget::OutcomeTreated
    };
    let fx = fixture(cfg, target);
    let with_sigma = !binary;
    let n_fn = labels(with_sigma).len();

    // Forward: iid joint draws of (theta, Phi).
    let mut fwd_rng = stream_rng(cfg.seed, "geweke/forward");
    let mut sampler = Sampler::new(&fx.xs, &fx.agent, &fx.synth)?;
    let mut forward: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.sweeps); n_fn];
    for _ in 0..cfg.sweeps {
        forward_draw(&mut sampler, &mut fwd_rng)?;
        record(&sampler, &fx.probes, with_sigma, &mut forward);
    }

    // Successive-conditional: Gibbs sweep against data regenerated from
    // the current parameters each iteration.
    let mut sc_rng = stream_rng(cfg.seed, "geweke/successive");
    let mut sampler = Sampler::new(&fx.xs, &fx.agent, &fx.synth)?;
    forward_draw(&mut sampler, &mut sc_rng)?;
    let n = sampler.n();
    let observed = vec![true; n];
    let mut y = DVector::zeros(n);
    let mut z = vec![0u8; n];
    let mut chain: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.sweeps); n_fn];
    for sweep in 0..cfg.sweeps {
        // Regenerate data from the current parameters.
        if binary {
            for i in 0..n {
                let p = 1.0 / (1.0 + (-sampler.eta(i)).exp());
                z[i] = u8::from(sc_rng.gen::<f64>() < p);
            }
            // omega's conditional PG(1, eta) does not involve z.
            for i in 0..n {
                sampler.omega[i] = sample_polya_gamma(sampler.eta(i), &mut sc_rng)?;
            }
            sampler.sweep_binary(&z, &mut sc_rng, false, sweep)?;
        } else {
            for i in 0..n {
                y[i] = sampler.eta(i)
                    + sampler.sigma2.sqrt() * sc_rng.sample::<f64, _>(StandardNormal);
            }
            sampler.sweep_continuous(&y, &observed, &mut sc_rng, false, sweep)?;
        }
        record(&sampler, &fx.probes, with_sigma, &mut chain);
    }

    let zs = labels(with_sigma)
        .into_iter()
        .enumerate()
        .map(|(k, label)| (label, geweke_z(&forward[k], &chain[k])))
        .collect();
    Ok(GewekeReport { zs })
}

pub fn geweke_continuous(cfg: &GewekeConfig) -> Result<GewekeReport> {
    run(cfg, false)
}

pub fn geweke_binary(cfg: &GewekeConfig) -> Result<GewekeReport> {
    run(cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuous_sampler_gets_it_right() {
        let report = geweke_continuous(&GewekeConfig::default()).unwrap();
        assert!(
            report.max_abs_z() < 3.0,
            "continuous Geweke z-scores: {:?}",
            report.zs
        );
    }

    #[test]
    fn binary_sampler_gets_it_right() {
        let report = geweke_binary(&GewekeConfig::default()).unwrap();
        assert!(
            report.max_abs_z() < 3.0,
            "binary Geweke z-scores: {:?}",
            report.zs
        );
    }
}
