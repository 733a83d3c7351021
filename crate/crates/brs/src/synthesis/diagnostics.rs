//! Small sampler diagnostics: a two-sample Kolmogorov-Smirnov test and
//! batch-means standard errors for autocorrelated chains.

/// Asymptotic two-sample KS p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|u, v| u.partial_cmp(v).unwrap());
    ys.sort_by(|u, v| u.partial_cmp(v).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        let diff = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        d = d.max(diff);
    }
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    kolmogorov_sf(lambda)
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}

/// Batch-means standard error of the mean for an autocorrelated chain.
pub fn batch_means_se(chain: &[f64]) -> f64 {
    let n = chain.len();
    assert!(n >= 20, "chain too short for batch means");
    let n_batches = (n as f64).sqrt().floor() as usize;
    let batch_len = n / n_batches;
    let used = n_batches * batch_len;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| {
            chain[b * batch_len..(b + 1) * batch_len].iter().sum::<f64>() / batch_len as f64
        })
        .collect();
    let grand = chain[..used].iter().sum::<f64>() / used as f64;
    let var_b = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
        / (n_batches - 1) as f64;
    (var_b / n_batches as f64).sqrt()
}

/// z-score comparing the means of an iid sample and a correlated chain.
pub fn geweke_z(iid: &[f64], chain: &[f64]) -> f64 {
    let m1 = iid.iter().sum::<f64>() / iid.len() as f64;
    let v1 = iid.iter().map(|x| (x - m1).powi(2)).sum::<f64>() / (iid.len() - 1) as f64;
    let se1 = (v1 / iid.len() as f64).sqrt();
    let m2 = chain.iter().sum::<f64>() / chain.len() as f64;
    let se2 = batch_means_se(chain);
    (m1 - m2) / (se1 * se1 + se2 * se2).sqrt()
}
