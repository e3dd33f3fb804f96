//! Rank-normalized split R-hat and bulk effective sample size.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::criterion::finite_or_null;
use crate::error::{invalid, Error, Result};

/// Average ranks (1-based) of `x`, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Maps pooled draws through fractional ranks and the normal quantile.
pub fn rank_normalize<C: AsRef<[f64]>>(chains: &[C]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.as_ref().iter().copied()).collect();
    let ranks = average_ranks(&pooled);
    let s = pooled.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        let n = c.as_ref().len();
        out.push(ranks[offset..offset + n].iter().map(|&r| normal.inverse_cdf((r - 0.375) / (s + 0.25))).collect());
        offset += n;
    }
    out
}

/// Splits each chain into two halves, dropping the middle draw of odd chains.
pub fn split_chains<C: AsRef<[f64]>>(chains: &[C]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = c.as_ref();
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn check_chains<C: AsRef<[f64]>>(chains: &[C], min_len: usize) -> Result<usize> {
    let Some(first) = chains.first() else {
        return Err(invalid("at least one chain is required"));
    };
    let n = first.as_ref().len();
    if chains.iter().any(|c| c.as_ref().len() != n) {
        return Err(invalid("chains must have equal length"));
    }
    if n < min_len {
        return Err(Error::TooFewDraws { needed: min_len, got: n });
    }
    if chains.iter().flat_map(|c| c.as_ref()).any(|x| !x.is_finite()) {
        return Err(invalid("draws must be finite"));
    }
    let x0 = first.as_ref()[0];
    if chains.iter().all(|c| c.as_ref().iter().all(|&x| x == x0)) {
        return Err(Error::Undefined("parameter is constant across all draws".into()));
    }
    Ok(n)
}

/// Biased autocovariance `sum_i (x_i - m)(x_{i+t} - m) / n` for every lag.
pub fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let len = 2 * n;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|z| z.re / (len as f64 * n as f64)).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Multi-chain ESS with Geyer's initial monotone positive sequence, without
/// rank normalization or splitting.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let w = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = w * (nf - 1.0) / nf;
    if m > 1 {
        let grand = mean(&means);
        var_plus += means.iter().map(|&x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    let rho = |t: usize| 1.0 - (w - acov.iter().map(|a| a[t]).sum::<f64>() / m as f64) / var_plus;

    let mut rho_hat = vec![0.0; n];
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[0] = even;
    rho_hat[1] = odd;
    let mut t = 1;
    while t + 5 < n && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho_hat[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 4 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + rho_hat[max_t + 1]).max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size of one parameter. Each slice is one chain.
///
/// Not capped at the number of draws: antithetic chains can exceed it.
pub fn ess_bulk<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    check_chains(chains, 8)?;
    let z = rank_normalize(chains);
    Ok(ess_raw(&split_chains(&z)))
}

/// Rank-normalized split R-hat of one parameter.
pub fn split_rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    check_chains(chains, 4)?;
    let split = split_chains(&rank_normalize(chains));
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n * means.iter().map(|&x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let w = split
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|&x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ess_bulk: f64,
    /// `ess_bulk` capped at the total number of draws.
    pub ess_bulk_capped: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiChainSummary {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub parameters: Vec<ParameterSummary>,
    pub min_ess_index: usize,
    pub min_ess: f64,
    pub max_rhat: f64,
    pub gradient_evaluations: u64,
    /// Capped minimum ESS per post-warmup gradient evaluation.
    #[serde(with = "finite_or_null")]
    pub ess_per_gradient: f64,
    /// Capped minimum ESS per second of summed sampling time.
    pub ess_per_second: Option<f64>,
}

/// Summarizes chains given as draws×d matrices of equal shape.
pub fn summarize(
    chains: &[&DMatrix<f64>],
    names: &[String],
    gradient_evaluations: u64,
    sampling_seconds: f64,
) -> Result<MultiChainSummary> {
    let first = chains.first().ok_or_else(|| invalid("at least one chain is required"))?;
    let (n, d) = first.shape();
    if chains.iter().any(|c| c.shape() != (n, d)) {
        return Err(invalid("chains must share one shape"));
    }
    if names.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: names.len() });
    }
    let total = (chains.len() * n) as f64;
    let mut parameters = Vec::with_capacity(d);
    for (j, name) in names.iter().enumerate() {
        let columns: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j).iter().copied().collect()).collect();
        let ess = ess_bulk(&columns)?;
        let rhat = split_rhat(&columns)?;
        let pooled: Vec<f64> = columns.concat();
        let mu = mean(&pooled);
        let sd = (pooled.iter().map(|&x| (x - mu).powi(2)).sum::<f64>() / (total - 1.0)).sqrt();
        parameters.push(ParameterSummary {
            name: name.clone(),
            mean: mu,
            sd,
            ess_bulk: ess,
            ess_bulk_capped: ess.min(total),
            rhat,
        });
    }
    let min_ess_index = argmin_ess(&parameters);
    let min_ess = parameters[min_ess_index].ess_bulk_capped;
    let max_rhat = parameters.iter().map(|p| p.rhat).fold(f64::NEG_INFINITY, f64::max);
    Ok(MultiChainSummary {
        chains: chains.len(),
        draws_per_chain: n,
        parameters,
        min_ess_index,
        min_ess,
        max_rhat,
        gradient_evaluations,
        ess_per_gradient: min_ess / gradient_evaluations as f64,
        ess_per_second: (sampling_seconds > 0.0).then(|| min_ess / sampling_seconds),
    })
}

fn argmin_ess(parameters: &[ParameterSummary]) -> usize {
    parameters
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.ess_bulk_capped.total_cmp(&b.1.ess_bulk_capped).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}
