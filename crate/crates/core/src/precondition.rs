//! Linear reparameterizations `q = B q'` that decorrelate and rescale the
//! target, and the automatic choice between them.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::laplace::PosteriorApprox;
use crate::models::Model;
use crate::nuts::Target;
use crate::sparse::{
    dense_cholesky, dense_solve_lower, CholeskyFactor, LinalgError, DEFAULT_DENSE_CAP,
};

#[derive(Debug, Clone)]
pub enum Preconditioner {
    Identity { dim: usize },
    /// `q = s ⊙ q'`.
    Diagonal { scales: Vec<f64> },
    /// `q = L q'` with `L = chol(Σ)`.
    Dense { l: DMatrix<f64> },
    /// `q = Pᵀ L⁻ᵀ q'` with `L = chol(P Q Pᵀ)`.
    Sparse { factor: Arc<CholeskyFactor> },
}

impl Preconditioner {
    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { dim } => *dim,
            Self::Diagonal { scales } => scales.len(),
            Self::Dense { l } => l.nrows(),
            Self::Sparse { factor } => factor.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity { .. } => "identity",
            Self::Diagonal { .. } => "diag",
            Self::Dense { .. } => "dense",
            Self::Sparse { .. } => "sparse",
        }
    }

    pub fn diagonal(scales: Vec<f64>) -> Result<Self, LinalgError> {
        if let Some(i) = scales.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(LinalgError::InvalidStructure(format!("scale {i} is {}", scales[i])));
        }
        Ok(Self::Diagonal { scales })
    }

    /// Dense preconditioner from a covariance matrix.
    pub fn dense(sigma: &DMatrix<f64>) -> Result<Self, LinalgError> {
        Ok(Self::Dense { l: dense_cholesky(sigma)? })
    }

    fn check(&self, len: usize) -> Result<(), LinalgError> {
        if len != self.dim() {
            return Err(LinalgError::DimensionMismatch { expected: self.dim(), got: len });
        }
        Ok(())
    }

    /// `q' = B⁻¹ q`.
    pub fn forward(&self, q: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.check(q.len())?;
        Ok(match self {
            Self::Identity { .. } => q.to_vec(),
            Self::Diagonal { scales } => q.iter().zip(scales).map(|(x, s)| x / s).collect(),
            Self::Dense { l } => {
                let mut x = q.to_vec();
                dense_solve_lower(l, &mut x);
                x
            }
            Self::Sparse { factor } => {
                let mut pq = vec![0.0; q.len()];
                factor.perm().apply(q, &mut pq);
                let mut out = vec![0.0; q.len()];
                factor.mul_upper(&pq, &mut out)?;
                out
            }
        })
    }

    /// `q = B q'`, written into `out`.
    pub fn backward_into(&self, qp: &[f64], out: &mut [f64]) -> Result<(), LinalgError> {
        self.check(qp.len())?;
        self.check(out.len())?;
        match self {
            Self::Identity { .. } => out.copy_from_slice(qp),
            Self::Diagonal { scales } => {
                for ((o, x), s) in out.iter_mut().zip(qp).zip(scales) {
                    *o = x * s;
                }
            }
            Self::Dense { l } => {
                let n = qp.len();
                for i in 0..n {
                    let mut s = 0.0;
                    for k in 0..=i {
                        s += l[(i, k)] * qp[k];
                    }
                    out[i] = s;
                }
            }
            Self::Sparse { factor } => {
                let mut y = qp.to_vec();
                factor.solve_upper_in_place(&mut y)?;
                factor.perm().apply_transpose(&y, out);
            }
        }
        Ok(())
    }

    pub fn backward(&self, qp: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut out = vec![0.0; qp.len()];
        self.backward_into(qp, &mut out)?;
        Ok(out)
    }

    /// `g' = Bᵀ g`, the gradient in the transformed space. `g` is clobbered.
    pub fn pullback_in_place(&self, g: &mut [f64], out: &mut [f64]) -> Result<(), LinalgError> {
        self.check(g.len())?;
        match self {
            Self::Identity { .. } => out.copy_from_slice(g),
            Self::Diagonal { scales } => {
                for ((o, x), s) in out.iter_mut().zip(g.iter()).zip(scales) {
                    *o = x * s;
                }
            }
            Self::Dense { l } => {
                let n = g.len();
                for j in 0..n {
                    let mut s = 0.0;
                    for i in j..n {
                        s += l[(i, j)] * g[i];
                    }
                    out[j] = s;
                }
            }
            Self::Sparse { factor } => {
                factor.perm().apply(g, out);
                factor.solve_lower_in_place(out)?;
            }
        }
        Ok(())
    }
}

/// Log density and gradient of the model in the transformed space, with the
/// constant Jacobian dropped.
pub fn transformed_logdensity_grad(
    p: &Preconditioner,
    m: &dyn Model,
    qp: &[f64],
) -> Result<(f64, Vec<f64>), LinalgError> {
    let q = p.backward(qp)?;
    let mut g = vec![0.0; q.len()];
    let f = m.log_density_grad(&q, &mut g);
    let mut gp = vec![0.0; q.len()];
    p.pullback_in_place(&mut g, &mut gp)?;
    Ok((f, gp))
}

/// A model seen through a preconditioner, with its own scratch buffers.
pub struct PreconditionedTarget {
    model: Arc<dyn Model>,
    precond: Arc<Preconditioner>,
    q: Vec<f64>,
    g: Vec<f64>,
}

impl PreconditionedTarget {
    pub fn new(model: Arc<dyn Model>, precond: Arc<Preconditioner>) -> Self {
        let n = model.dim();
        assert_eq!(n, precond.dim(), "preconditioner and model dimensions differ");
        Self { model, precond, q: vec![0.0; n], g: vec![0.0; n] }
    }

    pub fn preconditioner(&self) -> &Preconditioner {
        &self.precond
    }
}

impl Target for PreconditionedTarget {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn log_density_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        if self.precond.backward_into(x, &mut self.q).is_err() {
            return f64::NAN;
        }
        let f = self.model.log_density_grad(&self.q, &mut self.g);
        if self.precond.pullback_in_place(&mut self.g, grad).is_err() {
            return f64::NAN;
        }
        f
    }
}

/// `κ = (Σ_d (λ_max / λ_d)⁴)^{1/4}` over the eigenvalues of a covariance.
pub fn condition_factor(s: &DMatrix<f64>) -> Result<f64, LinalgError> {
    let eig = s.clone().symmetric_eigen().eigenvalues;
    let lmin = eig.min();
    if !(lmin > 0.0) {
        return Err(LinalgError::NotPositiveDefinite { column: 0, pivot: lmin });
    }
    let lmax = eig.max();
    Ok(eig.iter().map(|l| (lmax / l).powi(4)).sum::<f64>().powf(0.25))
}

/// Largest absolute pairwise correlation and the ratio of largest to
/// smallest marginal sd.
pub fn correlation_stats(s: &DMatrix<f64>) -> (f64, f64) {
    let n = s.nrows();
    let sd: Vec<f64> = (0..n).map(|i| s[(i, i)].sqrt()).collect();
    let mut max_corr = 0.0_f64;
    for j in 0..n {
        for i in j + 1..n {
            max_corr = max_corr.max((s[(i, j)] / (sd[i] * sd[j])).abs());
        }
    }
    let hi = sd.iter().cloned().fold(0.0, f64::max);
    let lo = sd.iter().cloned().fold(f64::INFINITY, f64::min);
    (max_corr, hi / lo)
}

/// Diagonal of `A⁻¹` by one triangular solve per coordinate.
pub fn marginal_variances(factor: &CholeskyFactor) -> Vec<f64> {
    let n = factor.dim();
    let mut e = vec![0.0; n];
    let mut x = vec![0.0; n];
    (0..n)
        .map(|i| {
            e[i] = 1.0;
            factor.perm().apply(&e, &mut x);
            e[i] = 0.0;
            factor.solve_lower_in_place(&mut x).expect("dimensions match");
            x.iter().map(|v| v * v).sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub dim: usize,
    pub max_abs_corr: f64,
    pub sd_ratio: f64,
    /// Skipped (null) above the eigen-decomposition cap.
    pub kappa: Option<f64>,
    pub sparsity_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// Correlations at or below this are "low" and get a diagonal metric.
    pub corr_threshold: f64,
    pub timing_reps: usize,
    pub dense_cap: usize,
    pub kappa_cap: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { corr_threshold: 0.3, timing_reps: 20, dense_cap: DEFAULT_DENSE_CAP, kappa_cap: 1000 }
    }
}

/// Times one gradient evaluation. Injectable so selection can be tested.
pub trait GradClock {
    /// Seconds taken by `f`, for preconditioner `kind`.
    fn time(&mut self, kind: &str, f: &mut dyn FnMut()) -> f64;
}

/// Wall-clock timing.
#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl GradClock for WallClock {
    fn time(&mut self, _kind: &str, f: &mut dyn FnMut()) -> f64 {
        let t = Instant::now();
        f();
        t.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub precond: Preconditioner,
    pub report: Option<ConditionReport>,
    /// No approximation was available; run baseline NUTS with mass adaptation.
    pub stan_default: bool,
    pub trace: Vec<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Covariance implied by an approximation, when small enough to form.
pub fn approx_covariance(a: &PosteriorApprox, cap: usize) -> Option<DMatrix<f64>> {
    (a.dim() <= cap).then(|| crate::sparse::factor_inverse(&a.factor))
}

/// Condition statistics of the approximation's covariance.
pub fn condition_report(a: &PosteriorApprox, cfg: &SelectorConfig) -> ConditionReport {
    let dim = a.dim();
    let sparsity_percent = a.q.sparsity_percent();
    match approx_covariance(a, cfg.dense_cap) {
        Some(sigma) => {
            let (max_abs_corr, sd_ratio) = correlation_stats(&sigma);
            let kappa = (dim <= cfg.kappa_cap).then(|| condition_factor(&sigma).ok()).flatten();
            ConditionReport { dim, max_abs_corr, sd_ratio, kappa, sparsity_percent }
        }
        None => {
            let var = marginal_variances(&a.factor);
            let hi = var.iter().cloned().fold(0.0, f64::max);
            let lo = var.iter().cloned().fold(f64::INFINITY, f64::min);
            ConditionReport { dim, max_abs_corr: f64::NAN, sd_ratio: (hi / lo).sqrt(), kappa: None, sparsity_percent }
        }
    }
}

/// Builds a named preconditioner (`diag`, `dense`, `sparse`) from an approximation.
pub fn build_preconditioner(kind: &str, a: &PosteriorApprox, cfg: &SelectorConfig) -> Result<Preconditioner, LinalgError> {
    match kind {
        "identity" => Ok(Preconditioner::Identity { dim: a.dim() }),
        "diag" => Preconditioner::diagonal(marginal_variances(&a.factor).iter().map(|v| v.sqrt()).collect()),
        "dense" => {
            let sigma = approx_covariance(a, cfg.dense_cap)
                .ok_or(LinalgError::DimensionTooLarge { dim: a.dim(), cap: cfg.dense_cap })?;
            Preconditioner::dense(&sigma)
        }
        "sparse" => Ok(Preconditioner::Sparse { factor: Arc::new(a.factor.clone()) }),
        other => Err(LinalgError::InvalidStructure(format!("unknown preconditioner `{other}`"))),
    }
}

/// Median time of `reps` transformed-gradient evaluations at points near `q̂`.
fn time_transformed(
    p: &Preconditioner,
    model: &Arc<dyn Model>,
    centre: &[f64],
    reps: usize,
    clock: &mut dyn GradClock,
) -> f64 {
    let mut target = PreconditionedTarget::new(model.clone(), Arc::new(p.clone()));
    let base = p.forward(centre).expect("dimensions match");
    let mut grad = vec![0.0; base.len()];
    let times: Vec<f64> = (0..reps)
        .map(|r| {
            let x: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + 0.01 * (((i + r) % 7) as f64 - 3.0)).collect();
            clock.time(p.kind(), &mut || {
                std::hint::black_box(target.log_density_grad(&x, &mut grad));
            })
        })
        .collect();
    median(times)
}

/// Automatic choice: identity plus baseline adaptation without an
/// approximation, diagonal when correlations are low, otherwise whichever of
/// dense and sparse evaluates the gradient faster.
pub fn build_auto(
    approx: Option<&PosteriorApprox>,
    model: &Arc<dyn Model>,
    cfg: &SelectorConfig,
    clock: &mut dyn GradClock,
) -> Selection {
    let Some(a) = approx else {
        return Selection {
            precond: Preconditioner::Identity { dim: model.dim() },
            report: None,
            stan_default: true,
            trace: vec!["no posterior approximation: falling back to stan_default".into()],
        };
    };
    let report = condition_report(a, cfg);
    let mut trace = vec![format!(
        "max|corr| = {:.4}, sd ratio = {:.4}, sparsity = {:.1}%",
        report.max_abs_corr, report.sd_ratio, report.sparsity_percent
    )];
    let low = report.max_abs_corr <= cfg.corr_threshold;
    if low {
        trace.push(format!("max|corr| <= {}: diag", cfg.corr_threshold));
        let precond = build_preconditioner("diag", a, cfg).expect("marginal variances are positive");
        return Selection { precond, report: Some(report), stan_default: false, trace };
    }
    let sparse = build_preconditioner("sparse", a, cfg).expect("factor exists");
    let precond = match build_preconditioner("dense", a, cfg) {
        Ok(dense) => {
            let td = time_transformed(&dense, model, &a.q_hat, cfg.timing_reps, clock);
            let ts = time_transformed(&sparse, model, &a.q_hat, cfg.timing_reps, clock);
            let pick = if ts < td { sparse } else { dense };
            trace.push(format!("median gradient time dense = {td:.3e}s, sparse = {ts:.3e}s: {}", pick.kind()));
            pick
        }
        Err(e) => {
            trace.push(format!("dense unavailable ({e}): sparse"));
            sparse
        }
    };
    Selection { precond, report: Some(report), stan_default: false, trace }
}

/// Repeats `f` until a batch takes at least 1 ms; returns the batch size.
fn calibrate(f: &mut dyn FnMut()) -> usize {
    let mut k = 1;
    loop {
        let t = Instant::now();
        for _ in 0..k {
            f();
        }
        if t.elapsed().as_secs_f64() >= 1e-3 || k >= 1 << 20 {
            return k;
        }
        k *= 2;
    }
}

fn batch_median(reps: usize, k: usize, f: &mut dyn FnMut()) -> f64 {
    let times = (0..reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..k {
                f();
            }
            t.elapsed().as_secs_f64() / k as f64
        })
        .collect();
    median(times)
}

/// Per-evaluation median times for gradient benchmarking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCost {
    pub raw: f64,
    pub transformed: f64,
    /// `backward` plus gradient pullback alone.
    pub transform_only: f64,
}

impl GradientCost {
    pub fn ratio(&self) -> f64 {
        self.transformed / self.raw
    }
}

/// Times raw and transformed gradients at `q` (median over `reps` batches).
pub fn gradient_cost(p: &Preconditioner, m: &Arc<dyn Model>, q: &[f64], reps: usize) -> GradientCost {
    let reps = reps.max(5);
    let n = m.dim();
    let mut g = vec![0.0; n];
    let qp = p.forward(q).expect("dimensions match");
    let mut raw = || {
        std::hint::black_box(m.log_density_grad(std::hint::black_box(q), &mut g));
    };
    let k = calibrate(&mut raw);
    let raw_t = batch_median(reps, k, &mut raw);

    let mut target = PreconditionedTarget::new(m.clone(), Arc::new(p.clone()));
    let mut gp = vec![0.0; n];
    let mut transformed = || {
        std::hint::black_box(target.log_density_grad(std::hint::black_box(&qp), &mut gp));
    };
    let trans_t = batch_median(reps, k, &mut transformed);

    let mut qb = vec![0.0; n];
    let mut gb = vec![0.0; n];
    let mut gout = vec![0.0; n];
    let mut only = || {
        p.backward_into(std::hint::black_box(&qp), &mut qb).expect("dimensions match");
        gb.copy_from_slice(&qb);
        p.pullback_in_place(&mut gb, &mut gout).expect("dimensions match");
        std::hint::black_box(&gout);
    };
    let k2 = calibrate(&mut only);
    let only_t = batch_median(reps, k2, &mut only);
    GradientCost { raw: raw_t, transformed: trans_t, transform_only: only_t }
}

/// Median transformed-gradient time over raw-gradient time.
pub fn gradient_cost_ratio(p: &Preconditioner, m: &Arc<dyn Model>, reps: usize) -> f64 {
    let q = m.initial_point();
    gradient_cost(p, m, &q, reps).ratio()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::{laplace_approx, LaplaceConfig};
    use crate::models::{build_model, Ar1Gaussian, BivariateNormal, ModelConfig};
    use crate::sparse::{factorize, Permutation, SparseSymMatrix};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn condition_factor_examples() {
        assert_abs_diff_eq!(condition_factor(&DMatrix::identity(2, 2)).unwrap(), 2f64.powf(0.25), epsilon = 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 1.0]);
        let expected = (1.0 + 199f64.powi(4)).powf(0.25);
        assert_abs_diff_eq!(condition_factor(&s).unwrap(), expected, epsilon = 1e-6);
        assert_abs_diff_eq!(condition_factor(&s).unwrap(), 199.0, epsilon = 1e-3);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 100.0]));
        assert_abs_diff_eq!(condition_factor(&s).unwrap(), 100.0, epsilon = 1e-6);
        assert!(condition_factor(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn correlation_stats_examples() {
        assert_eq!(correlation_stats(&DMatrix::identity(3, 3)), (0.0, 1.0));
        let (c, r) = correlation_stats(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 4.0]));
        assert_abs_diff_eq!(c, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-15);
    }

    fn sparse_2x2() -> Preconditioner {
        let a = SparseSymMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap();
        Preconditioner::Sparse { factor: Arc::new(factorize(&a, &Permutation::identity(2)).unwrap()) }
    }

    #[test]
    fn forward_examples() {
        let id = Preconditioner::Identity { dim: 2 };
        assert_eq!(id.forward(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
        let d = Preconditioner::diagonal(vec![2.0, 0.5]).unwrap();
        assert_eq!(d.forward(&[1.0, 1.0]).unwrap(), vec![0.5, 2.0]);
        assert_eq!(d.backward(&[0.5, 2.0]).unwrap(), vec![1.0, 1.0]);
        let s = sparse_2x2().forward(&[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(s[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 2f64.sqrt(), epsilon = 1e-15);
        assert!(Preconditioner::diagonal(vec![1.0, 0.0]).is_err());
        assert!(id.forward(&[1.0]).is_err());
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn all_variants(n: usize, rng: &mut ChaCha8Rng) -> Vec<Preconditioner> {
        let s = random_spd(n, rng);
        let q = SparseSymMatrix::from_dense(&s.clone().try_inverse().unwrap()).unwrap();
        let perm = crate::sparse::amd_order(&q);
        vec![
            Preconditioner::Identity { dim: n },
            Preconditioner::diagonal((0..n).map(|_| rng.random::<f64>() + 0.1).collect()).unwrap(),
            Preconditioner::dense(&s).unwrap(),
            Preconditioner::Sparse { factor: Arc::new(factorize(&q, &perm).unwrap()) },
        ]
    }

    #[test]
    fn round_trip_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 5, 40] {
            for p in all_variants(n, &mut rng) {
                let q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let back = p.backward(&p.forward(&q).unwrap()).unwrap();
                for (a, b) in q.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{}", p.kind());
                }
            }
        }
    }

    #[test]
    fn transformed_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model: Arc<dyn Model> = Arc::new(Ar1Gaussian::new(6, 0.6, 5.0).unwrap());
        for p in all_variants(6, &mut rng) {
            let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let (_, g) = transformed_logdensity_grad(&p, model.as_ref(), &x).unwrap();
            let mut xp = x.clone();
            for i in 0..6 {
                let h = 1e-6;
                xp[i] = x[i] + h;
                let fp = transformed_logdensity_grad(&p, model.as_ref(), &xp).unwrap().0;
                xp[i] = x[i] - h;
                let fm = transformed_logdensity_grad(&p, model.as_ref(), &xp).unwrap().0;
                xp[i] = x[i];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{} {i}: {fd} vs {}", p.kind(), g[i]);
            }
        }
    }

    #[test]
    fn matching_preconditioners_whiten_a_gaussian() {
        let m = Ar1Gaussian::new(5, 0.8, 10.0).unwrap();
        let sigma = m.covariance();
        let model: Arc<dyn Model> = Arc::new(m);
        let dense = Preconditioner::dense(&sigma).unwrap();
        let a = laplace_approx(model.clone(), &LaplaceConfig::default()).unwrap();
        let sparse = build_preconditioner("sparse", &a, &SelectorConfig::default()).unwrap();
        for p in [dense, sparse] {
            let x = [0.3, -1.2, 0.5, 2.0, -0.7];
            let (f, g) = transformed_logdensity_grad(&p, model.as_ref(), &x).unwrap();
            let (f0, _) = transformed_logdensity_grad(&p, model.as_ref(), &[0.0; 5]).unwrap();
            let half_norm: f64 = x.iter().map(|v| 0.5 * v * v).sum();
            assert_abs_diff_eq!(f - f0, -half_norm, epsilon = 1e-6);
            for i in 0..5 {
                assert_abs_diff_eq!(g[i], -x[i], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn auto_without_approximation_falls_back() {
        let model: Arc<dyn Model> = Arc::new(BivariateNormal::new(1.0, 0.0).unwrap());
        let sel = build_auto(None, &model, &SelectorConfig::default(), &mut WallClock);
        assert!(sel.stan_default);
        assert_eq!(sel.precond.kind(), "identity");
    }

    struct FakeClock {
        dense: f64,
        sparse: f64,
    }

    impl GradClock for FakeClock {
        fn time(&mut self, kind: &str, _f: &mut dyn FnMut()) -> f64 {
            if kind == "dense" {
                self.dense
            } else {
                self.sparse
            }
        }
    }

    #[test]
    fn auto_selection_follows_correlation_and_timing() {
        let cfg = SelectorConfig::default();
        let schools = build_model(&ModelConfig::new("eight_schools_nc")).unwrap();
        let a = laplace_approx(schools.clone(), &LaplaceConfig::default()).unwrap();
        let sel = build_auto(Some(&a), &schools, &cfg, &mut FakeClock { dense: 1.0, sparse: 2.0 });
        assert_eq!(sel.precond.kind(), "diag");

        let reg = build_model(&ModelConfig::new("correlated_regression")).unwrap();
        let a = laplace_approx(reg.clone(), &LaplaceConfig::default()).unwrap();
        let pick = |d, s| build_auto(Some(&a), &reg, &cfg, &mut FakeClock { dense: d, sparse: s }).precond.kind();
        assert_eq!(pick(1.0, 2.0), "dense");
        assert_eq!(pick(2.0, 1.0), "sparse");
        assert_eq!(pick(1.0, 2.0), pick(1.0, 2.0));
        assert!(condition_report(&a, &cfg).max_abs_corr > 0.999);
    }

    #[test]
    fn marginal_variances_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_spd(12, &mut rng);
        let q = SparseSymMatrix::from_dense(&s).unwrap();
        let f = factorize(&q, &crate::sparse::amd_order(&q)).unwrap();
        let inv = s.try_inverse().unwrap();
        for (i, v) in marginal_variances(&f).iter().enumerate() {
            assert_abs_diff_eq!(*v, inv[(i, i)], epsilon = 1e-9);
        }
    }

    #[test]
    fn identity_cost_ratio_is_near_one() {
        let model: Arc<dyn Model> = Arc::new(Ar1Gaussian::new(50, 0.5, 1.0).unwrap());
        let r = gradient_cost_ratio(&Preconditioner::Identity { dim: 50 }, &model, 9);
        assert!(r > 0.5 && r < 2.0, "{r}");
    }
}
