//! Nearest-neighbor Gaussian-process scaffolding: point ordering, neighbor
//! sets, the correlation kernel, and the per-point conditional regression
//! terms B(X_i), F(X_i) shared by both Gibbs samplers.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::datamodel::StandardizedCovariates;
use crate::error::{BrsError, Result};

/// Diagonal jitter for the local kernel solves. The smallest level keeps
/// the saturated (m = n-1) factorization in 1e-8 agreement with the dense
/// Gaussian; larger levels are fallbacks for near-singular neighbor sets.
const KERNEL_JITTERS: [f64; 3] = [1e-12, 1e-10, 1e-8];

/// Exponential correlation: exp(-distance / psi).
pub fn kernel_corr(distance: f64, psi: f64) -> f64 {
    debug_assert!(distance >= 0.0 && psi > 0.0);
    (-distance / psi).exp()
}

/// Ordering, m-nearest earlier neighbors, and the transpose relation
/// needed by the beta full conditionals. Pairwise distances among each
/// point's neighbor set are cached so conditional terms can be rebuilt
/// cheaply when the range parameter moves.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    /// ordering[k] = original index of the k-th ordered point.
    pub ordering: Vec<usize>,
    /// position[i] = ordered position of original point i.
    pub position: Vec<usize>,
    /// neighbors[i] = original indices of the (up to m) nearest
    /// earlier-ordered points of i.
    pub neighbors: Vec<Vec<usize>>,
    pub m: usize,
    /// reverse_index[i] = list of (t, slot) with neighbors[t][slot] == i.
    pub reverse_index: Vec<Vec<(usize, usize)>>,
    /// Euclidean distance from i to each of its neighbors.
    pub neighbor_dists: Vec<Vec<f64>>,
    /// Row-major k x k distance matrix among the neighbors of i.
    pub neighbor_pair_dists: Vec<Vec<f64>>,
}

fn euclidean(x: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..x.ncols() {
        let d = x[(a, j)] - x[(b, j)];
        s += d * d;
    }
    s.sqrt()
}

/// First-principal-component scores of the standardized covariates,
/// computed by deterministic power iteration.
fn first_pc_scores(x: &DMatrix<f64>) -> DVector<f64> {
    let q = x.ncols();
    let gram = x.transpose() * x;
    let mut v = DVector::from_element(q, 1.0 / (q as f64).sqrt());
    for _ in 0..500 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        let w = w / norm;
        let delta = (&w - &v).norm();
        v = w;
        if delta < 1e-14 {
            break;
        }
    }
    // Fix the sign: largest-magnitude loading is positive.
    let (imax, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .unwrap();
    if v[imax] < 0.0 {
        v = -v;
    }
    x * v
}

/// Build the neighbor graph: order points by first-principal-component
/// score (ties broken by original index), then take the m nearest
/// earlier-ordered points in Euclidean distance.
pub fn build_graph(xs: &StandardizedCovariates, m: usize) -> Result<NeighborGraph> {
    let n = xs.n();
    if m < 1 {
        return Err(BrsError::Config("neighbor count m must be >= 1".into()));
    }
    if n < 2 {
        return Err(BrsError::Config("need at least 2 points".into()));
    }
    let scores = first_pc_scores(&xs.values);
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut position = vec![0usize; n];
    for (k, &i) in ordering.iter().enumerate() {
        position[i] = k;
    }

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for k in 1..n {
        let i = ordering[k];
        let take = m.min(k);
        let mut cands: Vec<(f64, usize)> = ordering[..k]
            .iter()
            .map(|&e| (euclidean(&xs.values, i, e), e))
            .collect();
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        neighbors[i] = cands[..take].iter().map(|&(_, e)| e).collect();
    }

    let mut reverse_index: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for i in 0..n {
        for (slot, &e) in neighbors[i].iter().enumerate() {
            reverse_index[e].push((i, slot));
        }
    }

    let mut neighbor_dists = Vec::with_capacity(n);
    let mut neighbor_pair_dists = Vec::with_capacity(n);
    for i in 0..n {
        let nb = &neighbors[i];
        let k = nb.len();
        neighbor_dists.push(nb.iter().map(|&e| euclidean(&xs.values, i, e)).collect());
        let mut pd = vec![0.0; k * k];
        for a in 0..k {
            for b in (a + 1)..k {
                let d = euclidean(&xs.values, nb[a], nb[b]);
                pd[a * k + b] = d;
                pd[b * k + a] = d;
            }
        }
        neighbor_pair_dists.push(pd);
    }

    Ok(NeighborGraph {
        ordering,
        position,
        neighbors,
        m,
        reverse_index,
        neighbor_dists,
        neighbor_pair_dists,
    })
}

/// Per-point conditional regression coefficients B and residual variance
/// fractions F in the NNGP factorization, at range parameter psi.
#[derive(Debug, Clone)]
pub struct ConditionalTerms {
    pub b: Vec<Vec<f64>>,
    pub f: Vec<f64>,
}

pub fn conditional_terms(graph: &NeighborGraph, psi: f64) -> Result<ConditionalTerms> {
    if !(psi > 0.0) {
        return Err(BrsError::Config(format!("psi must be positive, got {psi}")));
    }
    let n = graph.neighbors.len();
    let mut b = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    for i in 0..n {
        let k = graph.neighbors[i].len();
        if k == 0 {
            b.push(Vec::new());
            f.push(1.0);
            continue;
        }
        let base = DMatrix::from_fn(k, k, |a, bx| {
            kernel_corr(graph.neighbor_pair_dists[i][a * k + bx], psi)
        });
        let c_in = DVector::from_fn(k, |a, _| kernel_corr(graph.neighbor_dists[i][a], psi));
        let chol = KERNEL_JITTERS
            .iter()
            .find_map(|&jitter| {
                let mut c_nn = base.clone();
                for d in 0..k {
                    c_nn[(d, d)] += jitter;
                }
                Cholesky::new(c_nn)
            })
            .ok_or_else(|| {
                BrsError::Numerical(format!("kernel solve failed at point {i} (psi = {psi})"))
            })?;
        let sol = chol.solve(&c_in);
        let fi = 1.0 - c_in.dot(&sol);
        assert!(fi > -1e-12, "F({i}) = {fi} fell below -1e-12");
        f.push(fi.clamp(1e-12, 1.0));
        b.push(sol.iter().copied().collect());
    }
    Ok(ConditionalTerms { b, f })
}

/// Joint log-density of the NNGP prior: sum of per-point Gaussian
/// conditionals of beta* = beta - mean.
pub fn nngp_logdensity(
    beta: &[f64],
    mean: f64,
    tau2: f64,
    terms: &ConditionalTerms,
    graph: &NeighborGraph,
) -> f64 {
    debug_assert!(tau2 > 0.0);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ld = 0.0;
    for i in 0..beta.len() {
        let mut cond_mean = 0.0;
        for (slot, &e) in graph.neighbors[i].iter().enumerate() {
            cond_mean += terms.b[i][slot] * (beta[e] - mean);
        }
        let var = tau2 * terms.f[i];
        let resid = (beta[i] - mean) - cond_mean;
        ld += -0.5 * (ln_2pi + var.ln() + resid * resid / var);
    }
    ld
}

/// Draw a realization of the NNGP prior sequentially along the ordering.
pub fn sample_prior<R: rand::Rng>(
    mean: f64,
    tau2: f64,
    terms: &ConditionalTerms,
    graph: &NeighborGraph,
    rng: &mut R,
) -> Vec<f64> {
    use rand_distr::StandardNormal;
    let n = graph.ordering.len();
    let mut beta = vec![0.0; n];
    for &i in &graph.ordering {
        let mut cond_mean = 0.0;
        for (slot, &e) in graph.neighbors[i].iter().enumerate() {
            cond_mean += terms.b[i][slot] * (beta[e] - mean);
        }
        let sd = (tau2 * terms.f[i]).sqrt();
        let z: f64 = rng.sample(StandardNormal);
        beta[i] = mean + cond_mean + sd * z;
    }
    beta
}

/// Default support for the uniform prior on psi: (0.05 dbar, 2 dbar),
/// with dbar the mean pairwise distance over a deterministic subsample of
/// at most 500 points.
pub fn default_psi_bounds(xs: &StandardizedCovariates) -> (f64, f64) {
    let n = xs.n();
    let take = n.min(500);
    let stride = (n as f64 / take as f64).max(1.0);
    let idx: Vec<usize> = (0..take)
        .map(|k| ((k as f64 * stride) as usize).min(n - 1))
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..idx.len() {
        for b in (a + 1)..idx.len() {
            sum += euclidean(&xs.values, idx[a], idx[b]);
            count += 1;
        }
    }
    let dbar = if count > 0 { sum / count as f64 } else { 1.0 };
    let dbar = if dbar > 0.0 { dbar } else { 1.0 };
    (0.05 * dbar, 2.0 * dbar)
}
