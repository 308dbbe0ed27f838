//! Two-sided Wilcoxon rank-sum test.
//!
//! Exact enumeration of all rank assignments when the pooled sample size is at
//! most 12; otherwise a normal approximation with midrank tie correction and
//! continuity correction.

use crate::error::{Error, Result};

const EXACT_LIMIT: usize = 12;

/// Standard normal CDF (Zelen & Severo polynomial, |error| < 7.5e-8).
pub fn normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - normal_cdf(-x);
    }
    let t = 1.0 / (1.0 + 0.2316419 * x);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - pdf * poly
}

/// Midranks of the pooled sample, ties averaged.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // 1-based ranks i+1 ..= j+1
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Enumerate every way to pick `n_x` of the pooled ranks and count how many
/// rank sums deviate from the mean at least as much as the observed one.
fn exact_p(ranks: &[f64], n_x: usize, w_obs: f64) -> f64 {
    let n = ranks.len();
    let mu = n_x as f64 * (n + 1) as f64 / 2.0;
    let dev_obs = (w_obs - mu).abs() - 1e-9;
    let mut extreme = 0u64;
    let mut total = 0u64;
    // iterative combination enumeration over indices
    let mut comb: Vec<usize> = (0..n_x).collect();
    loop {
        let w: f64 = comb.iter().map(|&i| ranks[i]).sum();
        total += 1;
        if (w - mu).abs() >= dev_obs {
            extreme += 1;
        }
        // next combination in lexicographic order
        let mut i = n_x;
        loop {
            if i == 0 {
                return extreme as f64 / total as f64;
            }
            i -= 1;
            if comb[i] != i + n - n_x {
                break;
            }
        }
        comb[i] += 1;
        for j in i + 1..n_x {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

fn validate_samples(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() < 3 || y.len() < 3 {
        return Err(Error::Stats(format!(
            "rank-sum test needs at least 3 samples per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Stats("rank-sum test requires finite samples".into()));
    }
    Ok(())
}

/// Two-sided rank-sum p-value for the hypothesis that `x` and `y` come from
/// the same distribution. Exact for pooled sizes up to 12, normal
/// approximation beyond.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<f64> {
    validate_samples(x, y)?;
    if x.len() + y.len() <= EXACT_LIMIT {
        wilcoxon_rank_sum_exact(x, y)
    } else {
        wilcoxon_rank_sum_approx(x, y)
    }
}

/// Exact two-sided p by full enumeration of rank assignments.
pub fn wilcoxon_rank_sum_exact(x: &[f64], y: &[f64]) -> Result<f64> {
    validate_samples(x, y)?;
    let n = x.len() + y.len();
    if n > 24 {
        return Err(Error::Stats(format!(
            "exact enumeration limited to pooled size 24, got {n}"
        )));
    }
    let pooled: Vec<f64> = x.iter().chain(y).cloned().collect();
    let ranks = midranks(&pooled);
    let w: f64 = ranks[..x.len()].iter().sum();
    Ok(exact_p(&ranks, x.len(), w))
}

/// Two-sided p from the normal approximation with midrank tie correction and
/// continuity correction.
pub fn wilcoxon_rank_sum_approx(x: &[f64], y: &[f64]) -> Result<f64> {
    validate_samples(x, y)?;
    let n_x = x.len();
    let n_y = y.len();
    let n = n_x + n_y;
    let pooled: Vec<f64> = x.iter().chain(y).cloned().collect();
    let ranks = midranks(&pooled);
    let w: f64 = ranks[..n_x].iter().sum();

    let mu = n_x as f64 * (n + 1) as f64 / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = pooled;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var = (n_x as f64 * n_y as f64 / 12.0) * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        // all values identical: no evidence of any difference
        return Ok(1.0);
    }
    let dev = ((w - mu).abs() - 0.5).max(0.0); // continuity correction
    let z = dev / var.sqrt();
    Ok((2.0 * (1.0 - normal_cdf(z))).min(1.0))
}
