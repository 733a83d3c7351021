//! Runtime validation suite behind the `validate` subcommand: quick
//! structural oracles that re-check the numerical core on the installed
//! binary without compiling the test harness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datamodel::standardize_matrix;
use crate::drposterior::{
    bootstrap_dr_posterior, dr_point_equal, ensemble_weights, DrInputs, EnsembleMethod,
};
use crate::nngp::{build_graph, conditional_terms, kernel_corr, nngp_logdensity, sample_prior};
use crate::rng::stream_rng;
use crate::synthesis::polya_gamma::{pg_mean, sample_polya_gamma};

#[derive(Debug, Clone)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> ValidationCheck {
    ValidationCheck { name: name.to_string(), passed, detail }
}

fn dense_logdensity(beta: &[f64], mean: f64, tau2: f64, psi: f64, x: &DMatrix<f64>) -> f64 {
    let n = beta.len();
    let cov = DMatrix::from_fn(n, n, |a, b| {
        let mut d = 0.0;
        for j in 0..x.ncols() {
            let e = x[(a, j)] - x[(b, j)];
            d += e * e;
        }
        tau2 * kernel_corr(d.sqrt(), psi)
    });
    let chol = nalgebra::Cholesky::new(cov).expect("dense kernel is PD");
    let centered = DVector::from_fn(n, |i, _| beta[i] - mean);
    let sol = chol.solve(&centered);
    let logdet = 2.0 * (0..n).map(|d| chol.l()[(d, d)].ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + centered.dot(&sol))
}

fn nngp_dense_agreement() -> ValidationCheck {
    let mut rng = stream_rng(9001, "validate/nngp");
    let mut worst = 0.0f64;
    for &n in &[8usize, 20] {
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xs = standardize_matrix(&x);
        let graph = match build_graph(&xs, n - 1) {
            Ok(g) => g,
            Err(e) => return check("nngp-dense-agreement", false, e.to_string()),
        };
        for _ in 0..5 {
            let psi = 0.5 + 2.0 * rng.gen::<f64>();
            let tau2 = 0.3 + rng.gen::<f64>();
            let mean = rng.sample::<f64, _>(StandardNormal);
            let terms = match conditional_terms(&graph, psi) {
                Ok(t) => t,
                Err(e) => return check("nngp-dense-agreement", false, e.to_string()),
            };
            let beta = sample_prior(mean, tau2, &terms, &graph, &mut rng);
            let sparse = nngp_logdensity(&beta, mean, tau2, &terms, &graph);
            let dense = dense_logdensity(&beta, mean, tau2, psi, &xs.values);
            worst = worst.max((sparse - dense).abs());
        }
    }
    check(
        "nngp-dense-agreement",
        worst < 1e-8,
        format!("max |sparse - dense| = {worst:.3e}"),
    )
}

fn conditional_closed_forms() -> ValidationCheck {
    // Two points at a known distance: the first has no neighbors
    // (B empty, F = 1), the second regresses on it with B = corr(d) and
    // F = 1 - corr(d)^2.
    let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let xs = standardize_matrix(&x);
    let d = (xs.values[(1, 0)] - xs.values[(0, 0)]).abs();
    let graph = match build_graph(&xs, 1) {
        Ok(g) => g,
        Err(e) => return check("conditional-closed-forms", false, e.to_string()),
    };
    let psi = 1.3;
    let terms = match conditional_terms(&graph, psi) {
        Ok(t) => t,
        Err(e) => return check("conditional-closed-forms", false, e.to_string()),
    };
    let first = graph.ordering[0];
    let second = graph.ordering[1];
    let corr = kernel_corr(d, psi);
    let e1 = terms.f[first] - 1.0;
    let e2 = terms.b[second][0] - corr;
    let e3 = terms.f[second] - (1.0 - corr * corr);
    let worst = e1.abs().max(e2.abs()).max(e3.abs());
    let empty = terms.b[first].is_empty();
    check(
        "conditional-closed-forms",
        empty && worst < 1e-10,
        format!("max closed-form error = {worst:.3e}"),
    )
}

fn pg_moments() -> ValidationCheck {
    let mut rng = stream_rng(9002, "validate/pg");
    let n = 20_000;
    let mut worst = 0.0f64;
    for &c in &[0.0, 1.0, 3.0] {
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_polya_gamma(c, &mut rng).unwrap_or(f64::NAN))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        worst = worst.max((mean - pg_mean(c)).abs() / se);
    }
    check("pg-moments", worst < 4.0, format!("max |z| = {worst:.2}"))
}

fn bootstrap_identity() -> ValidationCheck {
    let n = 30;
    let b = 20_000;
    let mut rng = stream_rng(9003, "validate/bootstrap");
    let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
    let mu1 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mu0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let pi = DVector::from_fn(n, |_, _| 0.25 + 0.5 * rng.gen::<f64>());
    let data = match crate::datamodel::Dataset::new(
        y.clone(),
        z.clone(),
        DMatrix::zeros(n, 1),
        None,
        vec!["x1".into()],
    ) {
        Ok(d) => d,
        Err(e) => return check("bootstrap-mean-identity", false, e.to_string()),
    };
    let rep = |v: &DVector<f64>| DMatrix::from_fn(b, n, |_, i| v[i]);
    let post = match bootstrap_dr_posterior(&rep(&mu1), &rep(&mu0), &rep(&pi), &data, 9003) {
        Ok(p) => p,
        Err(e) => return check("bootstrap-mean-identity", false, e.to_string()),
    };
    let inputs = DrInputs::new(mu1, mu0, pi, y, z).expect("valid inputs");
    let tau = dr_point_equal(&inputs).expect("valid estimate");
    let se = post.sd() / (b as f64).sqrt();
    let z_score = (post.point - tau).abs() / se;
    check(
        "bootstrap-mean-identity",
        z_score < 3.0,
        format!("|bootstrap mean - equal-weight| = {z_score:.2} MC se"),
    )
}

fn akaike_weights() -> ValidationCheck {
    let w = match ensemble_weights(EnsembleMethod::Sic, &[10.0, 12.0, 14.0], &[0.0; 3]) {
        Ok(w) => w,
        Err(e) => return check("akaike-weights", false, e.to_string()),
    };
    let expected = [0.6652, 0.2447, 0.0900];
    let worst = w
        .w
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs())
        .fold(0.0f64, f64::max);
    check("akaike-weights", worst < 5e-5, format!("max error = {worst:.2e}"))
}

fn replication_determinism() -> ValidationCheck {
    use crate::harness::{run_replication, GroupKey, StudyConfig};
    let toml = r#"
format_version = 1
study = "sim1"
n_list = [50]
replications = 1
methods = ["GLM", "SA"]
base_seed = 9004
output_dir = "/tmp/brs-validate"
"#;
    let config = match StudyConfig::from_toml_str(toml) {
        Ok(c) => c,
        Err(e) => return check("replication-determinism", false, e.to_string()),
    };
    let group = GroupKey { n: 50, scenario: None, omit_x3: false };
    let a = run_replication(&config, group, 0);
    let b = run_replication(&config, group, 0);
    check(
        "replication-determinism",
        a.result == b.result && a.seed == b.seed,
        "re-running replication 0 with the same config".into(),
    )
}

/// Run every check; the CLI prints one line per entry.
pub fn run_validation() -> Vec<ValidationCheck> {
    vec![
        nngp_dense_agreement(),
        conditional_closed_forms(),
        pg_moments(),
        bootstrap_identity(),
        akaike_weights(),
        replication_determinism(),
    ]
}
