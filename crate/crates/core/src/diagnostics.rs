//! Effective sample size, split R-hat, 1-Wasserstein distance and run
//! summaries.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::nuts::RunResult;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty sample")]
    Empty,
    #[error("chains have unequal lengths")]
    Ragged,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Splits every chain into two halves, dropping the middle draw of odd
/// chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let Some(first) = chains.iter().flatten().next() else { return true };
    chains.iter().flatten().all(|x| x == first)
}

/// Replaces draws by normal scores of their pooled ranks, with ties averaged.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len();
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for k in i..=j {
            ranks[pooled[k].1] = r;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut it = ranks.into_iter();
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| normal.inverse_cdf((it.next().expect("rank count") - 0.375) / (s as f64 + 0.25)))
                .collect()
        })
        .collect()
}

/// Biased autocovariance at all lags via zero-padded FFT.
pub fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - m, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// ESS of already split chains with Geyer's initial monotone sequence.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let lag_mean = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let nf = n as f64;
    let mean_var = lag_mean(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
        let grand = means.iter().sum::<f64>() / m as f64;
        var_plus += means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    let mut rho = vec![0.0; n];
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - lag_mean(1)) / var_plus;
    rho[0] = even;
    rho[1] = odd;
    let mut t = 1;
    while t < n - 3 && even + odd > 0.0 {
        even = 1.0 - (mean_var - lag_mean(t + 1)) / var_plus;
        odd = 1.0 - (mean_var - lag_mean(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t - 2;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>() + rho[max_t + 1];
    total / tau.max(1.0 / total.log10())
}

fn check(chains: &[Vec<f64>]) -> Result<(), DiagnosticsError> {
    if chains.is_empty() || chains[0].is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if chains.iter().any(|c| c.len() != chains[0].len()) {
        return Err(DiagnosticsError::Ragged);
    }
    Ok(())
}

/// Rank-normalized split-chain bulk ESS. Constant input gives NaN.
pub fn bulk_ess(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check(chains)?;
    if is_constant(chains) || chains.iter().flatten().any(|x| !x.is_finite()) {
        return Ok(f64::NAN);
    }
    let split = split_chains(chains);
    Ok(ess_raw(&rank_normalize(&split)))
}

/// Split-chain potential scale reduction. Constant input gives NaN.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check(chains)?;
    if is_constant(chains) {
        return Ok(f64::NAN);
    }
    let split = split_chains(chains);
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    if n < 2.0 {
        return Ok(f64::NAN);
    }
    let means: Vec<f64> = split.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = split
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    Ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

/// 1-Wasserstein distance between empirical distributions: the L1 distance
/// between their quantile functions, exact for unequal sizes.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        // Next breakpoint of either quantile function, compared exactly.
        let (ea, eb) = ((i + 1) * nb, (j + 1) * na);
        let next = ea.min(eb) as f64 / (na * nb) as f64;
        total += (next - t) * (a[i] - b[j]).abs();
        t = next;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(total)
}

/// Per-dimension distances between two sets of draws (rows are draws).
pub fn wasserstein_per_dim(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>, DiagnosticsError> {
    let d = a.first().ok_or(DiagnosticsError::Empty)?.len();
    (0..d)
        .map(|k| {
            let x: Vec<f64> = a.iter().map(|r| r[k]).collect();
            let y: Vec<f64> = b.iter().map(|r| r[k]).collect();
            wasserstein1d(&x, &y)
        })
        .collect()
}

/// Mean and max of a per-dimension vector.
pub fn mean_max(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean, v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ess_bulk: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    /// Parameters followed by `lp__`.
    pub rows: Vec<SummaryRow>,
    pub min_ess: f64,
    pub total_time: f64,
    pub efficiency: f64,
    pub mean_leapfrog: f64,
    pub divergences: usize,
    pub max_rhat: f64,
    /// Rows whose ESS was undefined (constant draws).
    pub undefined_ess: Vec<String>,
}

fn summarize_column(name: &str, chains: &[Vec<f64>]) -> Result<SummaryRow, DiagnosticsError> {
    let n = chains.iter().map(|c| c.len()).sum::<usize>() as f64;
    let mean = chains.iter().flatten().sum::<f64>() / n;
    let sd = (chains.iter().flatten().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(SummaryRow { name: name.to_string(), mean, sd, ess_bulk: bulk_ess(chains)?, rhat: split_rhat(chains)? })
}

/// Summary from raw per-chain columns. `columns[k]` holds one vector per
/// chain for `names[k]`; the `lp__` column comes last.
pub fn summarize_columns(
    names: &[String],
    columns: &[Vec<Vec<f64>>],
    total_time: f64,
    mean_leapfrog: f64,
    divergences: usize,
) -> Result<SummaryTable, DiagnosticsError> {
    let rows = names
        .par_iter()
        .zip(columns.par_iter())
        .map(|(n, c)| summarize_column(n, c))
        .collect::<Result<Vec<_>, _>>()?;
    let undefined_ess = rows.iter().filter(|r| r.ess_bulk.is_nan()).map(|r| r.name.clone()).collect();
    let min_ess = rows.iter().map(|r| r.ess_bulk).filter(|e| !e.is_nan()).fold(f64::INFINITY, f64::min);
    let max_rhat = rows.iter().map(|r| r.rhat).filter(|e| !e.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    Ok(SummaryTable {
        rows,
        min_ess,
        total_time,
        efficiency: min_ess / total_time,
        mean_leapfrog,
        divergences,
        max_rhat,
        undefined_ess,
    })
}

/// Summary of a completed run. The total time includes the Laplace and
/// selection overhead.
pub fn summarize(run: &RunResult) -> Result<SummaryTable, DiagnosticsError> {
    let mut names = run.param_names.clone();
    names.push("lp__".into());
    let mut columns: Vec<Vec<Vec<f64>>> = (0..run.param_names.len()).map(|j| run.param_chains(j)).collect();
    columns.push(run.lp_chains());
    summarize_columns(&names, &columns, run.total_time(), run.mean_leapfrog(), run.divergences())
}

impl SummaryTable {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "mean", "sd", "ess_bulk", "rhat"])?;
        for r in &self.rows {
            w.write_record([r.name.clone(), r.mean.to_string(), r.sd.to_string(), r.ess_bulk.to_string(), r.rhat.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(chains: usize, n: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains).map(|c| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift[c % shift.len()]).collect()).collect()
    }

    fn ar1(chains: usize, n: usize, phi: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let s = (1.0 - phi * phi).sqrt();
        (0..chains)
            .map(|_| {
                let mut x: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        x = phi * x + s * rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn autocovariance_matches_direct_sum() {
        let x = [1.0, 3.0, -2.0, 0.5, 4.0, -1.0];
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let fast = autocovariance(&x);
        for t in 0..n {
            let direct: f64 = (0..n - t).map(|i| (x[i] - m) * (x[i + t] - m)).sum::<f64>() / n as f64;
            assert_abs_diff_eq!(fast[t], direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn iid_ess_is_near_draw_count() {
        let e = bulk_ess(&iid(4, 500, &[0.0], 1)).unwrap();
        assert!((1600.0..=2400.0).contains(&e), "{e}");
    }

    #[test]
    fn ar1_ess_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = bulk_ess(&ar1(4, 2000, 0.9, &mut rng)).unwrap();
        let expected = 8000.0 * 0.1 / 1.9;
        assert!((e / expected - 1.0).abs() < 0.25, "{e} vs {expected}");
    }

    #[test]
    fn constant_chain_is_nan() {
        assert!(bulk_ess(&[vec![1.0; 200], vec![1.0; 200]]).unwrap().is_nan());
        assert!(split_rhat(&[vec![1.0; 200]]).unwrap().is_nan());
        assert!(bulk_ess(&[]).is_err());
    }

    #[test]
    fn rhat_examples() {
        assert!(split_rhat(&iid(4, 1000, &[0.0], 3)).unwrap() < 1.01);
        assert!(split_rhat(&iid(4, 1000, &[0.0, 5.0], 3)).unwrap() > 2.0);
        let one = iid(1, 1000, &[0.0], 4);
        assert!(split_rhat(&one).unwrap() < 1.02);
        let trend: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0).collect();
        assert!(split_rhat(&[trend]).unwrap() > 1.5);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1d(&[0.0], &[5.0]).unwrap(), 5.0);
        assert_abs_diff_eq!(wasserstein1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        // Unequal sizes: {0, 1} against a point mass at 0.5.
        assert_abs_diff_eq!(wasserstein1d(&[0.0, 1.0], &[0.5]).unwrap(), 0.5, epsilon = 1e-15);
        // {0, 3} against {0, 1, 2}: quantile pieces of width 1/3, 1/6, 1/6, 1/3.
        let expect = 0.0 / 3.0 + (1.0 / 6.0) * 1.0 + (1.0 / 6.0) * 2.0 + (1.0 / 3.0) * 1.0;
        assert_abs_diff_eq!(wasserstein1d(&[3.0, 0.0], &[0.0, 1.0, 2.0]).unwrap(), expect, epsilon = 1e-15);
        assert!(wasserstein1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn summary_min_ess_and_efficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fast = iid(4, 500, &[0.0], 6);
        let slow = ar1(4, 500, 0.95, &mut rng);
        let names = vec!["a".to_string(), "lp__".to_string()];
        let t = summarize_columns(&names, &[fast.clone(), slow.clone()], 2.0, 3.0, 0).unwrap();
        let e_slow = bulk_ess(&slow).unwrap();
        assert_eq!(t.min_ess, e_slow.min(bulk_ess(&fast).unwrap()));
        assert_eq!(t.min_ess, t.row("lp__").unwrap().ess_bulk);
        assert_eq!(t.efficiency, t.min_ess / t.total_time);
        let again = summarize_columns(&names, &[fast, slow], 2.0, 3.0, 0).unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), serde_json::to_string(&again).unwrap());
    }
}
