//! Laplace approximation of the marginal posterior, the joint precision `Q`
//! at the conditional mode, precision sampling and the delta method.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Model;
use crate::sparse::{
    amd_order, factorize_with_jitter, CholeskyFactor, LinalgError, SparseSymMatrix, SymbolicCholesky,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum LaplaceError {
    #[error("{stage} did not converge in {iterations} iterations")]
    MaxIterations { stage: &'static str, iterations: usize },
    #[error("no interior mode: {0}")]
    NoInteriorMode(String),
    #[error("objective is not finite at {0:?}")]
    NonFiniteObjective(Vec<f64>),
    #[error("model has no random effects")]
    NoRandomEffects,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LaplaceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceConfig {
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub outer_gtol: f64,
    pub outer_ftol: f64,
    pub outer_max_iter: usize,
    /// Relative step of the central-difference outer gradient.
    pub grad_step: f64,
    /// Relative step for differencing the outer gradient into a Hessian.
    pub hess_step: f64,
    /// Newton steps on the marginal after BFGS stops.
    pub polish_steps: usize,
    /// Largest accepted ratio of Cholesky pivots of `Q`.
    pub max_condition: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            inner_tol: 1e-8,
            inner_max_iter: 100,
            outer_gtol: 1e-6,
            outer_ftol: 1e-10,
            outer_max_iter: 200,
            grad_step: 1e-4,
            hess_step: 1e-3,
            polish_steps: 3,
            max_condition: 1e12,
        }
    }
}

/// Conditional mode of the random effects at fixed `θ`.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub u: Vec<f64>,
    /// `-log p(û, θ)`.
    pub neg_log_joint: f64,
    /// Factor of `H_uu(û)`, absent without random effects.
    pub factor: Option<CholeskyFactor>,
    pub jitter: f64,
    pub iterations: usize,
}

/// `f_θ(θ) = -log p(û, θ) + ½ log det H_uu - (n/2) log 2π`, the negative log
/// Laplace-approximated marginal posterior.
pub struct MarginalObjective {
    model: Arc<dyn Model>,
    cfg: LaplaceConfig,
    symbolic: Option<SymbolicCholesky>,
}

impl MarginalObjective {
    pub fn new(model: Arc<dyn Model>, cfg: LaplaceConfig) -> Result<Self> {
        let symbolic = if model.random_idx().is_empty() {
            None
        } else {
            let h = model
                .hessian_uu(&model.initial_point())
                .ok_or_else(|| LaplaceError::NoInteriorMode("model declares random effects but no H_uu".into()))?;
            Some(SymbolicCholesky::analyze(&h, &amd_order(&h))?)
        };
        Ok(Self { model, cfg, symbolic })
    }

    pub fn model(&self) -> &Arc<dyn Model> {
        &self.model
    }

    pub fn config(&self) -> &LaplaceConfig {
        &self.cfg
    }

    pub fn n_random(&self) -> usize {
        self.model.random_idx().len()
    }

    pub fn n_fixed(&self) -> usize {
        self.model.fixed_idx().len()
    }

    pub fn join(&self, u: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.model.dim()];
        for (&i, &v) in self.model.random_idx().iter().zip(u) {
            q[i] = v;
        }
        for (&i, &v) in self.model.fixed_idx().iter().zip(theta) {
            q[i] = v;
        }
        q
    }

    pub fn split(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.model.random_idx().iter().map(|&i| q[i]).collect(),
            self.model.fixed_idx().iter().map(|&i| q[i]).collect(),
        )
    }

    fn factor_h(&self, q: &[f64]) -> Result<(CholeskyFactor, f64)> {
        let sym = self.symbolic.as_ref().expect("random effects present");
        let h = self.model.hessian_uu(q).expect("random effects present");
        factorize_with_jitter(sym, &h).map_err(|e| match e {
            LinalgError::NotPositiveDefinite { .. } => LaplaceError::NoInteriorMode(format!("H_uu: {e}")),
            other => other.into(),
        })
    }

    /// Newton iterations on `u` with step halving until `-log p` does not increase.
    pub fn inner_newton(&self, theta: &[f64], u0: &[f64]) -> Result<InnerSolution> {
        let r = self.model.random_idx();
        let n = self.model.dim();
        let mut q = self.join(u0, theta);
        let mut g = vec![0.0; n];
        let mut f = -self.model.log_density_grad(&q, &mut g);
        if !f.is_finite() {
            return Err(LaplaceError::NonFiniteObjective(q));
        }
        if r.is_empty() {
            return Ok(InnerSolution { u: Vec::new(), neg_log_joint: f, factor: None, jitter: 0.0, iterations: 0 });
        }
        let mut g_try = vec![0.0; n];
        for it in 0..=self.cfg.inner_max_iter {
            let gu: Vec<f64> = r.iter().map(|&i| g[i]).collect();
            let norm = gu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let (factor, jitter) = self.factor_h(&q)?;
            if norm < self.cfg.inner_tol {
                return Ok(InnerSolution {
                    u: r.iter().map(|&i| q[i]).collect(),
                    neg_log_joint: f,
                    factor: Some(factor),
                    jitter,
                    iterations: it,
                });
            }
            if it == self.cfg.inner_max_iter {
                break;
            }
            let step = factor.solve(&gu)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..50 {
                let mut q_try = q.clone();
                for (a, &i) in r.iter().enumerate() {
                    q_try[i] += t * step[a];
                }
                let f_try = -self.model.log_density_grad(&q_try, &mut g_try);
                // Within rounding of f, a step still counts if it shrinks the gradient.
                let flat = f_try - f <= 1e-12 * f.abs().max(1.0)
                    && r.iter().fold(0.0_f64, |m, &i| m.max(g_try[i].abs())) < norm;
                if f_try.is_finite() && (f_try < f || flat) {
                    q = q_try;
                    f = f_try;
                    std::mem::swap(&mut g, &mut g_try);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Stalled at rounding level: accept only if already close.
                if norm < 1e-6 {
                    return Ok(InnerSolution {
                        u: r.iter().map(|&i| q[i]).collect(),
                        neg_log_joint: f,
                        factor: Some(factor),
                        jitter,
                        iterations: it,
                    });
                }
                return Err(LaplaceError::NoInteriorMode(format!("inner line search stalled, |g_u| = {norm:.3e}")));
            }
        }
        Err(LaplaceError::MaxIterations { stage: "inner Newton", iterations: self.cfg.inner_max_iter })
    }

    /// `f_θ(θ)` and the inner solution it was computed from.
    pub fn value(&self, theta: &[f64], u0: &[f64]) -> Result<(f64, InnerSolution)> {
        let sol = self.inner_newton(theta, u0)?;
        let mut f = sol.neg_log_joint;
        if let Some(factor) = &sol.factor {
            f += 0.5 * factor.log_det() - 0.5 * self.n_random() as f64 * LN_2PI;
        }
        if !f.is_finite() {
            return Err(LaplaceError::NonFiniteObjective(theta.to_vec()));
        }
        Ok((f, sol))
    }

    /// Central-difference gradient of `f_θ`; every inner solve starts at `u0`.
    pub fn gradient(&self, theta: &[f64], u0: &[f64]) -> Result<Vec<f64>> {
        let mut x = theta.to_vec();
        let mut g = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let h = self.cfg.grad_step * theta[i].abs().max(1.0);
            x[i] = theta[i] + h;
            let fp = self.value(&x, u0)?.0;
            x[i] = theta[i] - h;
            let fm = self.value(&x, u0)?.0;
            x[i] = theta[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// Symmetrized central differences of [`Self::gradient`].
    pub fn hessian(&self, theta: &[f64], u0: &[f64]) -> Result<DMatrix<f64>> {
        let p = theta.len();
        let mut h = DMatrix::zeros(p, p);
        let mut x = theta.to_vec();
        for j in 0..p {
            let s = self.cfg.hess_step * theta[j].abs().max(1.0);
            x[j] = theta[j] + s;
            let gp = self.gradient(&x, u0)?;
            x[j] = theta[j] - s;
            let gm = self.gradient(&x, u0)?;
            x[j] = theta[j];
            for i in 0..p {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * s);
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

#[derive(Debug, Clone)]
pub struct OuterResult {
    pub theta: Vec<f64>,
    pub f: f64,
    pub u: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting at `θ₀`.
    pub f_history: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// BFGS on `f_θ` with finite-difference gradients and Armijo backtracking.
pub fn outer_optimize(mo: &MarginalObjective, theta0: &[f64], u0: &[f64]) -> Result<OuterResult> {
    let cfg = mo.config();
    let p = theta0.len();
    let mut x = theta0.to_vec();
    let (mut f, sol) = mo.value(&x, u0)?;
    let mut u = sol.u;
    let mut history = vec![f];
    if p == 0 {
        return Ok(OuterResult { theta: x, f, u, iterations: 0, converged: true, f_history: history });
    }
    let mut g = mo.gradient(&x, &u)?;
    let mut hinv = DMatrix::<f64>::identity(p, p);
    let mut first_update = true;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.outer_max_iter {
        if max_abs(&g) < cfg.outer_gtol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut d = -(&hinv * &gv);
        if d.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(p, p);
            d = -gv.clone();
        }
        let slope = d.dot(&gv);
        let dmax = d.amax();
        let mut t = if dmax > 10.0 { 10.0 / dmax } else { 1.0 };
        let mut next = None;
        for _ in 0..60 {
            let x_try: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok((f_try, sol)) = mo.value(&x_try, &u) {
                if f_try <= f + 1e-4 * t * slope {
                    next = Some((x_try, f_try, sol.u));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, u_new)) = next else {
            break;
        };
        let g_new = mo.gradient(&x_new, &u_new)?;
        let s = DVector::from_iterator(p, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(p, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                hinv *= sy / y.dot(&y);
                first_update = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(p, p);
            let a = &eye - rho * &s * y.transpose();
            let b = &eye - rho * &y * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        let rel = (f - f_new).abs() / f.abs().max(1.0);
        x = x_new;
        f = f_new;
        u = u_new;
        g = g_new;
        history.push(f);
        if rel < cfg.outer_ftol {
            converged = true;
            break;
        }
    }
    if !converged && iterations >= cfg.outer_max_iter {
        return Err(LaplaceError::MaxIterations { stage: "outer BFGS", iterations });
    }
    Ok(OuterResult { theta: x, f, u, iterations, converged: converged || max_abs(&g) < cfg.outer_gtol, f_history: history })
}

/// Wall time of each phase, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LaplaceTimings {
    pub optimize: f64,
    pub assemble: f64,
    pub factorize: f64,
}

impl LaplaceTimings {
    pub fn total(&self) -> f64 {
        self.optimize + self.assemble + self.factorize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceStatus {
    pub converged: bool,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    /// Jitter added to `H_uu` at the mode (0 when none).
    pub inner_jitter: f64,
    /// Jitter added to `Q` before factorization (0 when none).
    pub q_jitter: f64,
    pub neg_log_marginal: f64,
    pub max_grad_u: f64,
    pub timings: LaplaceTimings,
}

/// Gaussian approximation `N(q̂, Q⁻¹)` of the joint posterior.
#[derive(Debug, Clone)]
pub struct PosteriorApprox {
    pub q_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub q: SparseSymMatrix,
    /// Factor of `Q` (with `q_jitter` added) under a fill-reducing order.
    pub factor: CholeskyFactor,
    /// Hessian of the negative log marginal at `θ̂`.
    pub h_theta: DMatrix<f64>,
    pub status: LaplaceStatus,
}

impl PosteriorApprox {
    pub fn dim(&self) -> usize {
        self.q_hat.len()
    }

    pub fn jittered(&self) -> bool {
        self.status.inner_jitter > 0.0 || self.status.q_jitter > 0.0
    }

    /// Writes `q_hat.csv`, `Q.txt` and `laplace.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path, names: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("name,value\n");
        for (n, v) in names.iter().zip(&self.q_hat) {
            csv.push_str(&format!("{n},{v}\n"));
        }
        fs::write(dir.join("q_hat.csv"), csv)?;
        fs::write(dir.join("Q.txt"), self.q.to_text())?;
        let json = serde_json::to_string_pretty(&self.status).expect("status serializes");
        fs::write(dir.join("laplace.json"), json)?;
        Ok(())
    }
}

/// Builds `Q` at `q̂` from `H_uu`, the cross block `H_uθ` and the marginal
/// Hessian: `Q_θθ = H_θu H_uu⁻¹ H_uθ + H_θ̂θ̂`.
pub fn assemble_q(
    mo: &MarginalObjective,
    q_hat: &[f64],
    h_uu_factor: Option<&CholeskyFactor>,
    h_theta: &DMatrix<f64>,
) -> Result<SparseSymMatrix> {
    let model = mo.model();
    let r = model.random_idx();
    let fx = model.fixed_idx();
    let (nu, p) = (r.len(), fx.len());
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();

    let mut cross = DMatrix::<f64>::zeros(nu, p);
    if nu > 0 {
        let h = model.hessian_uu(q_hat).expect("random effects present");
        for j in 0..nu {
            for (i, v) in h.column(j) {
                trip.push((r[i], r[j], v));
            }
        }
        let analytic = model.cross_hessian(q_hat);
        match analytic {
            Some(entries) => {
                for (a, b, v) in entries {
                    cross[(a, b)] += v;
                    trip.push((r[a], fx[b], v));
                }
            }
            None => {
                let mut x = q_hat.to_vec();
                let mut gp = vec![0.0; model.dim()];
                let mut gm = vec![0.0; model.dim()];
                for (b, &j) in fx.iter().enumerate() {
                    let h = mo.config().grad_step * q_hat[j].abs().max(1.0);
                    x[j] = q_hat[j] + h;
                    model.log_density_grad(&x, &mut gp);
                    x[j] = q_hat[j] - h;
                    model.log_density_grad(&x, &mut gm);
                    x[j] = q_hat[j];
                    for (a, &i) in r.iter().enumerate() {
                        cross[(a, b)] = -(gp[i] - gm[i]) / (2.0 * h);
                    }
                }
                let scale = cross.amax();
                for a in 0..nu {
                    for b in 0..p {
                        if cross[(a, b)].abs() > 1e-12 * scale {
                            trip.push((r[a], fx[b], cross[(a, b)]));
                        }
                    }
                }
            }
        }
    }

    let mut theta_block = h_theta.clone();
    if nu > 0 {
        let factor = h_uu_factor.expect("factor of H_uu supplied with random effects");
        for b in 0..p {
            let col: Vec<f64> = cross.column(b).iter().copied().collect();
            let x = factor.solve(&col)?;
            for a in 0..p {
                theta_block[(a, b)] += cross.column(a).iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
            }
        }
        theta_block = (&theta_block + theta_block.transpose()) * 0.5;
    }
    for b in 0..p {
        for a in b..p {
            trip.push((fx[a], fx[b], theta_block[(a, b)]));
        }
    }
    Ok(SparseSymMatrix::from_triplets(model.dim(), &trip)?)
}

/// Full Laplace pipeline: marginal mode, conditional mode, `Q` and its factor.
pub fn laplace_approx(model: Arc<dyn Model>, cfg: &LaplaceConfig) -> Result<PosteriorApprox> {
    let t0 = Instant::now();
    let mo = MarginalObjective::new(model.clone(), cfg.clone())?;
    let (u0, theta0) = mo.split(&model.initial_point());
    let outer = outer_optimize(&mo, &theta0, &u0)?;
    let mut theta = outer.theta;
    let mut u = outer.u;
    let mut f = outer.f;
    let mut converged = outer.converged;
    let mut h_theta = mo.hessian(&theta, &u)?;

    // Newton polish on the marginal: BFGS with differenced gradients stalls
    // a little short of the mode on badly scaled problems.
    for _ in 0..cfg.polish_steps {
        if theta.is_empty() {
            break;
        }
        let g = mo.gradient(&theta, &u)?;
        if max_abs(&g) < 1e-3 * cfg.outer_gtol {
            converged = true;
            break;
        }
        let Some(chol) = h_theta.clone().cholesky() else { break };
        let step = chol.solve(&DVector::from_column_slice(&g));
        let x_try: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a - b).collect();
        let Ok((f_try, sol)) = mo.value(&x_try, &u) else { break };
        if !(f_try <= f + 1e-12 * f.abs().max(1.0)) {
            break;
        }
        let g_try = mo.gradient(&x_try, &sol.u)?;
        if max_abs(&g_try) > max_abs(&g) && f_try >= f {
            break;
        }
        theta = x_try;
        u = sol.u;
        f = f_try;
        converged |= max_abs(&g_try) < cfg.outer_gtol;
        h_theta = mo.hessian(&theta, &u)?;
    }

    let sol = mo.inner_newton(&theta, &u)?;
    let q_hat = mo.join(&sol.u, &theta);
    let mut g = vec![0.0; model.dim()];
    model.log_density_grad(&q_hat, &mut g);
    let max_grad_u = model.random_idx().iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
    let optimize = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let q = assemble_q(&mo, &q_hat, sol.factor.as_ref(), &h_theta)?;
    let assemble = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    if q.values().iter().any(|v| !v.is_finite()) {
        return Err(LaplaceError::NoInteriorMode("Q has non-finite entries".into()));
    }
    let sym = SymbolicCholesky::analyze(&q, &amd_order(&q))?;
    let (factor, q_jitter) = factorize_with_jitter(&sym, &q).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => LaplaceError::NoInteriorMode(format!("Q: {e}")),
        other => other.into(),
    })?;
    let pivots: Vec<f64> = factor.diag().iter().map(|d| d * d).collect();
    let ratio = pivots.iter().cloned().fold(0.0, f64::max) / pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(ratio <= cfg.max_condition) {
        return Err(LaplaceError::NoInteriorMode(format!("Q pivot ratio {ratio:.3e} exceeds {:.1e}", cfg.max_condition)));
    }
    let factorize = t2.elapsed().as_secs_f64();

    Ok(PosteriorApprox {
        q_hat,
        theta_hat: theta,
        q,
        factor,
        h_theta,
        status: LaplaceStatus {
            converged,
            inner_iterations: sol.iterations,
            outer_iterations: outer.iterations,
            inner_jitter: sol.jitter,
            q_jitter,
            neg_log_marginal: f,
            max_grad_u,
            timings: LaplaceTimings { optimize, assemble, factorize },
        },
    })
}

/// `n` draws from `N(q̂, Q⁻¹)` as `q̂ + Pᵀ L⁻ᵀ z`.
pub fn precision_sample(a: &PosteriorApprox, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = a.dim();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = a.factor.sample_from(&z).expect("dimensions match");
            x.iter().zip(&a.q_hat).map(|(v, m)| v + m).collect()
        })
        .collect()
}

/// `sd = √(jᵀ Q⁻¹ j) = ‖L⁻¹ P j‖`.
pub fn delta_method(a: &PosteriorApprox, j: &[f64]) -> Result<f64> {
    let mut pj = vec![0.0; a.dim()];
    if j.len() != a.dim() {
        return Err(LinalgError::DimensionMismatch { expected: a.dim(), got: j.len() }.into());
    }
    a.factor.perm().apply(j, &mut pj);
    a.factor.solve_lower_in_place(&mut pj)?;
    Ok(pj.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// The Laplace-marginalized posterior over `θ` as a model of its own, with a
/// differenced gradient. Inner solves always start from `û(θ̂)`, so
/// evaluations are pure.
pub struct MarginalModel {
    mo: MarginalObjective,
    u_start: Vec<f64>,
    theta_start: Vec<f64>,
    names: Vec<String>,
    fixed: Vec<usize>,
    name: String,
}

/// Wraps a model with random effects as its embedded Laplace marginal.
pub fn marginal_model(model: Arc<dyn Model>, cfg: &LaplaceConfig) -> Result<MarginalModel> {
    if model.random_idx().is_empty() {
        return Err(LaplaceError::NoRandomEffects);
    }
    let mo = MarginalObjective::new(model.clone(), cfg.clone())?;
    let (u0, theta0) = mo.split(&model.initial_point());
    let outer = outer_optimize(&mo, &theta0, &u0)?;
    Ok(marginal_model_at(mo, outer.theta, outer.u))
}

/// As [`marginal_model`], reusing a known marginal mode.
pub fn marginal_model_from(model: Arc<dyn Model>, cfg: &LaplaceConfig, a: &PosteriorApprox) -> Result<MarginalModel> {
    if model.random_idx().is_empty() {
        return Err(LaplaceError::NoRandomEffects);
    }
    let mo = MarginalObjective::new(model, cfg.clone())?;
    let (u, theta) = mo.split(&a.q_hat);
    Ok(marginal_model_at(mo, theta, u))
}

fn marginal_model_at(mo: MarginalObjective, theta: Vec<f64>, u: Vec<f64>) -> MarginalModel {
    let all = mo.model().param_names();
    let names = mo.model().fixed_idx().iter().map(|&i| all[i].clone()).collect();
    let p = theta.len();
    let name = format!("{}_ela", mo.model().name());
    MarginalModel { mo, u_start: u, theta_start: theta, names, fixed: (0..p).collect(), name }
}

impl MarginalModel {
    pub fn objective(&self) -> &MarginalObjective {
        &self.mo
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_start
    }

    /// Number of `f_θ` evaluations per gradient.
    pub fn evaluations_per_gradient(&self) -> usize {
        2 * self.theta_start.len() + 1
    }

    /// Random effects at the conditional mode for a given `θ`.
    pub fn conditional_mode(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.mo.inner_newton(theta, &self.u_start).ok().map(|s| s.u)
    }
}

impl Model for MarginalModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.fixed.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn random_idx(&self) -> &[usize] {
        &[]
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density(&self, q: &[f64]) -> f64 {
        match self.mo.value(q, &self.u_start) {
            Ok((f, _)) => -f,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let f = self.log_density(q);
        if !f.is_finite() {
            grad.iter_mut().for_each(|g| *g = f64::NAN);
            return f;
        }
        match self.mo.gradient(q, &self.u_start) {
            Ok(g) => {
                for (o, v) in grad.iter_mut().zip(g) {
                    *o = -v;
                }
                f
            }
            Err(_) => {
                grad.iter_mut().for_each(|g| *g = f64::NAN);
                f64::NEG_INFINITY
            }
        }
    }

    fn initial_point(&self) -> Vec<f64> {
        self.theta_start.clone()
    }
}
