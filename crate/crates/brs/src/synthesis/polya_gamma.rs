//! Exact Polya-Gamma PG(1, c) sampling via the alternating-series
//! accept/reject method on the tilted Jacobi theta representation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{BrsError, Result};

/// Series/proposal switch point for the Jacobi density.
const TRUNC: f64 = 0.64;
const MAX_PROPOSALS: usize = 1000;

/// log Phi(x) for a standard normal, stable far into the left tail.
fn log_normal_cdf(x: f64) -> f64 {
    if x < -37.0 {
        // Asymptotic expansion; statrs underflows to 0 here.
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    } else {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::new(0.0, 1.0).unwrap().cdf(x).ln()
    }
}

/// n-th term of the alternating series for the Jacobi density at x,
/// using the left (x <= t) or right (x > t) representation.
fn a_term(n: usize, x: f64) -> f64 {
    let k = n as f64 + 0.5;
    let mut lf = std::f64::consts::PI.ln() + k.ln();
    if x <= TRUNC {
        lf += 1.5 * (2.0f64.ln() - std::f64::consts::PI.ln() - x.ln()) - 2.0 * k * k / x;
    } else {
        lf += -0.5 * x * std::f64::consts::PI.powi(2) * k * k;
    }
    lf.exp()
}

/// Inverse-Gaussian(mu = 1/z, lambda = 1) truncated to (0, TRUNC].
fn rtigauss<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    let mu = if z > 0.0 { 1.0 / z } else { f64::INFINITY };
    if mu > t {
        // Sample 1/X from a truncated chi-square proposal, then tilt.
        loop {
            let mut e1: f64 = rng.sample::<f64, _>(rand_distr::Exp1);
            let mut e2: f64 = rng.sample::<f64, _>(rand_distr::Exp1);
            while e1 * e1 > 2.0 * e2 / t {
                e1 = rng.sample::<f64, _>(rand_distr::Exp1);
                e2 = rng.sample::<f64, _>(rand_distr::Exp1);
            }
            let x = t / ((1.0 + t * e1) * (1.0 + t * e1));
            let alpha = (-0.5 * z * z * x).exp();
            if rng.gen::<f64>() < alpha {
                return x;
            }
        }
    }
    loop {
        let y: f64 = rng.sample::<f64, _>(StandardNormal);
        let y = y * y;
        let muy = mu * y;
        let mut x = mu + 0.5 * mu * muy - 0.5 * mu * (4.0 * muy + muy * muy).sqrt();
        if rng.gen::<f64>() > mu / (mu + x) {
            x = mu * mu / x;
        }
        if x <= t {
            return x;
        }
    }
}

/// Draw from PG(1, c). Exact (no truncated-sum approximation).
pub fn sample_polya_gamma<R: Rng + ?Sized>(c: f64, rng: &mut R) -> Result<f64> {
    let z = c.abs() * 0.5;
    let t = TRUNC;
    let fz = std::f64::consts::PI.powi(2) / 8.0 + z * z / 2.0;

    // Mixture weight of the exponential right-tail proposal.
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + log_normal_cdf(b);
    let xa = x0 + z + log_normal_cdf(a);
    let qdivp = 4.0 / std::f64::consts::PI * (xb.exp() + xa.exp());
    let mass_texpon = 1.0 / (1.0 + qdivp);

    for _ in 0..MAX_PROPOSALS {
        let u: f64 = rng.gen();
        let x = if u < mass_texpon {
            t + rng.sample::<f64, _>(rand_distr::Exp1) / fz
        } else {
            rtigauss(z, rng)
        };
        // Squeeze by partial sums of the alternating series.
        let mut s = a_term(0, x);
        let y = rng.gen::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= a_term(n, x);
                if y <= s {
                    return Ok(x * 0.25);
                }
            } else {
                s += a_term(n, x);
                if y > s {
                    break;
                }
            }
            if n > MAX_PROPOSALS {
                break;
            }
        }
    }
    Err(BrsError::Numerical(format!(
        "Polya-Gamma sampler exhausted proposals at c = {c}"
    )))
}

/// Analytic mean of PG(1, c): tanh(c/2) / (2c), with the c -> 0 limit 1/4.
pub fn pg_mean(c: f64) -> f64 {
    if c.abs() < 1e-8 {
        0.25
    } else {
        (c / 2.0).tanh() / (2.0 * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::diagnostics::ks_two_sample;

    fn sample_many(c: f64, n: usize, label: &str) -> Vec<f64> {
        let mut rng = crate::rng::stream_rng(101, label);
        (0..n).map(|_| sample_polya_gamma(c, &mut rng).unwrap()).collect()
    }

    #[test]
    fn mean_at_zero_is_quarter() {
        let draws = sample_many(0.0, 100_000, "test/pg/zero");
        let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
        // Var PG(1,0) = 1/24, so 3 se ~ 3*sqrt(1/24/1e5) ~ 0.0019.
        assert!((mean - 0.25).abs() < 0.002, "mean = {mean}");
        let var: f64 =
            draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / draws.len() as f64;
        assert!((var - 1.0 / 24.0).abs() < 0.002, "var = {var}");
    }

    #[test]
    fn mean_matches_tanh_formula() {
        for &c in &[0.5, 2.0, 5.0] {
            let draws = sample_many(c, 100_000, "test/pg/tanh");
            let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
            assert!(
                (mean - pg_mean(c)).abs() < 0.002,
                "c = {c}: mean = {mean}, expected {}",
                pg_mean(c)
            );
        }
    }

    #[test]
    fn symmetric_in_sign_of_c() {
        let pos = sample_many(2.0, 10_000, "test/pg/pos");
        let neg = sample_many(-2.0, 10_000, "test/pg/neg");
        let p = ks_two_sample(&pos, &neg);
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn draws_are_positive_and_finite() {
        let mut rng = crate::rng::stream_rng(103, "test/pg/range");
        for &c in &[0.0, 1.0, 10.0, 40.0, -40.0] {
            for _ in 0..500 {
                let d = sample_polya_gamma(c, &mut rng).unwrap();
                assert!(d.is_finite() && d > 0.0);
            }
        }
    }

    #[test]
    fn log_cdf_tail_is_continuous() {
        // The asymptotic branch must join the statrs branch smoothly.
        let a = log_normal_cdf(-37.0 + 1e-9);
        let b = log_normal_cdf(-37.0 - 1e-9);
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}
