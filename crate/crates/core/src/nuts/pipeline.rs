//! End to end sampling: Laplace approximation, preconditioner choice, NUTS
//! in the transformed space and back-transformation of the draws.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{chain_rng, run_chain, ChainResult, MassAdapt, NutsConfig, NutsError, Target};
use crate::laplace::{laplace_approx, marginal_model_from, precision_sample, LaplaceConfig, LaplaceError, LaplaceStatus, PosteriorApprox};
use crate::models::Model;
use crate::precondition::{
    build_auto, build_preconditioner, correlation_stats, ConditionReport, PreconditionedTarget, Preconditioner,
    SelectorConfig, WallClock,
};
use crate::sparse::{dense_cholesky, LinalgError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingMode {
    #[serde(rename = "stan_default")]
    StanDefault,
    #[serde(rename = "snuts-auto")]
    SnutsAuto,
    #[serde(rename = "snuts-diag")]
    SnutsDiag,
    #[serde(rename = "snuts-dense")]
    SnutsDense,
    #[serde(rename = "snuts-sparse")]
    SnutsSparse,
    #[serde(rename = "ela-nuts")]
    ElaNuts,
    #[serde(rename = "ela-snuts")]
    ElaSnuts,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 7] = [
        Self::StanDefault,
        Self::SnutsAuto,
        Self::SnutsDiag,
        Self::SnutsDense,
        Self::SnutsSparse,
        Self::ElaNuts,
        Self::ElaSnuts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::StanDefault => "stan_default",
            Self::SnutsAuto => "snuts-auto",
            Self::SnutsDiag => "snuts-diag",
            Self::SnutsDense => "snuts-dense",
            Self::SnutsSparse => "snuts-sparse",
            Self::ElaNuts => "ela-nuts",
            Self::ElaSnuts => "ela-snuts",
        }
    }

    /// Baseline-style runs use long warmup with mass adaptation.
    pub fn is_baseline(self) -> bool {
        matches!(self, Self::StanDefault | Self::ElaNuts)
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let alias = match s {
            "auto" => "snuts-auto",
            "diag" => "snuts-diag",
            "dense" => "snuts-dense",
            "sparse" => "snuts-sparse",
            "ela" => "ela-snuts",
            other => other,
        };
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == alias)
            .ok_or_else(|| format!("unknown mode `{s}`; expected one of {}", Self::ALL.map(|m| m.as_str()).join(", ")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("Laplace approximation failed: {0}")]
    Laplace(#[from] LaplaceError),
    #[error("preconditioner: {0}")]
    Linalg(#[from] LinalgError),
    #[error("sampling failed in chain {chain}: {source}")]
    Sampling { chain: usize, source: NutsError },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub laplace: LaplaceConfig,
    pub selector: SelectorConfig,
    /// Worker threads for chains; 0 uses all cores.
    pub jobs: usize,
    /// Replaces the automatic choice (used when replaying a recorded run).
    pub precond_override: Option<String>,
    /// Forces the fallback recorded by an earlier automatic run.
    pub fallback_override: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            laplace: LaplaceConfig::default(),
            selector: SelectorConfig::default(),
            jobs: 0,
            precond_override: None,
            fallback_override: false,
        }
    }
}

/// Wall times in seconds. Chain phases are summed over chains, so totals do
/// not depend on how many chains ran concurrently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub optimize: f64,
    pub assemble: f64,
    pub factorize: f64,
    pub select: f64,
    pub warmup: f64,
    pub sample: f64,
}

impl RunTimings {
    pub fn overhead(&self) -> f64 {
        self.optimize + self.assemble + self.factorize + self.select
    }

    pub fn total(&self) -> f64 {
        self.overhead() + self.warmup + self.sample
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub mode: SamplingMode,
    pub param_names: Vec<String>,
    pub chains: Vec<ChainResult>,
    /// `identity`, `diag`, `dense` or `sparse`.
    pub precond: String,
    /// Set when the automatic mode fell back to baseline sampling.
    pub fallback: Option<String>,
    pub trace: Vec<String>,
    pub report: Option<ConditionReport>,
    pub laplace: Option<LaplaceStatus>,
    pub timings: RunTimings,
    pub warmup: usize,
    pub adapt_mass: MassAdapt,
    pub config: NutsConfig,
}

impl RunResult {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// Draws of parameter `j`, one vector per chain.
    pub fn param_chains(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(|d| d[j]).collect()).collect()
    }

    pub fn lp_chains(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.lp.clone()).collect()
    }

    pub fn mean_leapfrog(&self) -> f64 {
        let (s, n) = self
            .chains
            .iter()
            .flat_map(|c| &c.stats)
            .fold((0.0, 0usize), |(s, n), t| (s + t.leapfrog as f64, n + 1));
        s / n.max(1) as f64
    }

    pub fn mean_depth(&self) -> f64 {
        let (s, n) = self.chains.iter().flat_map(|c| &c.stats).fold((0.0, 0usize), |(s, n), t| (s + t.depth as f64, n + 1));
        s / n.max(1) as f64
    }

    pub fn divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences()).sum()
    }

    /// Iterations whose trajectory stopped at the depth cap.
    pub fn max_depth_hits(&self) -> usize {
        self.chains.iter().flat_map(|c| &c.stats).filter(|s| s.depth >= self.config.max_depth).count()
    }

    pub fn total_time(&self) -> f64 {
        self.timings.total()
    }
}

/// Covariance-based choice for small dense approximations: diagonal when
/// correlations are weak, dense otherwise.
fn precond_from_covariance(sigma: &DMatrix<f64>, kind: Option<&str>, cfg: &SelectorConfig) -> Result<(Preconditioner, String), LinalgError> {
    let (max_corr, sd_ratio) = correlation_stats(sigma);
    let kind = match kind {
        Some(k) => k.to_string(),
        None if max_corr <= cfg.corr_threshold => "diag".into(),
        None => "dense".into(),
    };
    let note = format!("marginal covariance: max|corr| = {max_corr:.4}, sd ratio = {sd_ratio:.4}: {kind}");
    let p = match kind.as_str() {
        "diag" | "sparse" => Preconditioner::diagonal((0..sigma.nrows()).map(|i| sigma[(i, i)].sqrt()).collect())?,
        "dense" => Preconditioner::dense(sigma)?,
        "identity" => Preconditioner::Identity { dim: sigma.nrows() },
        other => return Err(LinalgError::InvalidStructure(format!("unknown preconditioner `{other}`"))),
    };
    Ok((p, note))
}

fn inverse_spd(h: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    nalgebra::Cholesky::new(h.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| LinalgError::InvalidStructure("marginal Hessian is not positive definite".into()))
}

/// Draws from `N(m, H⁻¹)` for small dense `H`.
fn dense_normal_draws(m: &[f64], h: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, LinalgError> {
    let sigma = inverse_spd(h)?;
    let l = dense_cholesky(&sigma)?;
    Ok((0..n)
        .map(|_| {
            let z = nalgebra::DVector::from_fn(m.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let x = &l * z;
            m.iter().zip(x.iter()).map(|(a, b)| a + b).collect()
        })
        .collect())
}

struct Plan {
    model: Arc<dyn Model>,
    precond: Arc<Preconditioner>,
    inits: InitSource,
    baseline: bool,
    fallback: Option<String>,
    trace: Vec<String>,
    report: Option<ConditionReport>,
    laplace: Option<LaplaceStatus>,
    timings: RunTimings,
}

enum InitSource {
    /// Uniform(-2, 2) in every coordinate.
    Uniform,
    /// One candidate list per chain, in model space.
    Draws(Vec<Vec<f64>>),
}

fn approx_timings(a: &PosteriorApprox) -> RunTimings {
    let t = a.status.timings;
    RunTimings { optimize: t.optimize, assemble: t.assemble, factorize: t.factorize, ..Default::default() }
}

fn init_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_1417_u64
}

fn plan(model: Arc<dyn Model>, cfg: &NutsConfig, mode: SamplingMode, opts: &PipelineOptions) -> Result<Plan, PipelineError> {
    let n = model.dim();
    let identity = |trace: Vec<String>, fallback: Option<String>, laplace: Option<LaplaceStatus>, timings| Plan {
        model: model.clone(),
        precond: Arc::new(Preconditioner::Identity { dim: n }),
        inits: InitSource::Uniform,
        baseline: true,
        fallback,
        trace,
        report: None,
        laplace,
        timings,
    };
    match mode {
        SamplingMode::StanDefault => Ok(identity(vec!["stan_default: identity metric with diagonal adaptation".into()], None, None, RunTimings::default())),
        SamplingMode::SnutsAuto if opts.fallback_override => Ok(identity(
            vec!["replaying recorded fallback to stan_default".into()],
            Some("stan_default".into()),
            None,
            RunTimings::default(),
        )),
        SamplingMode::SnutsAuto | SamplingMode::SnutsDiag | SamplingMode::SnutsDense | SamplingMode::SnutsSparse => {
            let approx = match laplace_approx(model.clone(), &opts.laplace) {
                Ok(a) => a,
                Err(e) if mode == SamplingMode::SnutsAuto => {
                    let msg = format!("LAPLACE FAILED ({e}); falling back to stan_default");
                    log::warn!("{}: {msg}", model.name());
                    return Ok(identity(vec![msg], Some("stan_default".into()), None, RunTimings::default()));
                }
                Err(e) => return Err(e.into()),
            };
            let mut timings = approx_timings(&approx);
            let t = Instant::now();
            let forced = match mode {
                SamplingMode::SnutsDiag => Some("diag".to_string()),
                SamplingMode::SnutsDense => Some("dense".to_string()),
                SamplingMode::SnutsSparse => Some("sparse".to_string()),
                _ => opts.precond_override.clone(),
            };
            let (precond, report, mut trace) = match forced {
                Some(kind) => {
                    let p = build_preconditioner(&kind, &approx, &opts.selector)?;
                    let report = crate::precondition::condition_report(&approx, &opts.selector);
                    (p, Some(report), vec![format!("preconditioner fixed to {kind}")])
                }
                None => {
                    let sel = build_auto(Some(&approx), &model, &opts.selector, &mut WallClock);
                    (sel.precond, sel.report, sel.trace)
                }
            };
            timings.select = t.elapsed().as_secs_f64();
            if approx.jittered() {
                trace.push(format!(
                    "jitter added: inner {:.3e}, Q {:.3e}",
                    approx.status.inner_jitter, approx.status.q_jitter
                ));
            }
            let draws = precision_sample(&approx, cfg.chains * 20, init_seed(cfg.seed));
            Ok(Plan {
                model,
                precond: Arc::new(precond),
                inits: InitSource::Draws(draws),
                baseline: false,
                fallback: None,
                trace,
                report,
                laplace: Some(approx.status.clone()),
                timings,
            })
        }
        SamplingMode::ElaNuts | SamplingMode::ElaSnuts => {
            let approx = laplace_approx(model.clone(), &opts.laplace)?;
            let mut timings = approx_timings(&approx);
            let t = Instant::now();
            let marginal: Arc<dyn Model> = Arc::new(marginal_model_from(model.clone(), &opts.laplace, &approx)?);
            let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
            let draws = dense_normal_draws(&approx.theta_hat, &approx.h_theta, cfg.chains * 20, &mut rng)?;
            let (precond, mut trace, baseline) = if mode == SamplingMode::ElaNuts {
                (Preconditioner::Identity { dim: marginal.dim() }, vec!["ela-nuts: identity metric with diagonal adaptation".into()], true)
            } else {
                let sigma = inverse_spd(&approx.h_theta)?;
                let (p, note) = precond_from_covariance(&sigma, opts.precond_override.as_deref(), &opts.selector)?;
                (p, vec![note], false)
            };
            timings.select = t.elapsed().as_secs_f64();
            trace.insert(0, format!("marginal over {} fixed effects", marginal.dim()));
            Ok(Plan {
                model: marginal,
                precond: Arc::new(precond),
                inits: InitSource::Draws(draws),
                baseline,
                fallback: None,
                trace,
                report: None,
                laplace: Some(approx.status.clone()),
                timings,
            })
        }
    }
}

/// Picks the first candidate with a finite log density and gradient, trying
/// up to 100 points.
fn pick_init(
    target: &mut dyn Target,
    precond: &Preconditioner,
    candidates: &mut dyn FnMut(usize) -> Option<Vec<f64>>,
) -> Result<Vec<f64>, NutsError> {
    let n = target.dim();
    let mut grad = vec![0.0; n];
    for k in 0..100 {
        let Some(q) = candidates(k) else { break };
        let Ok(x) = precond.forward(&q) else { continue };
        let lp = target.log_density_grad(&x, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(x);
        }
    }
    Err(NutsError::BadInit)
}

/// Runs `mode` on `model`.
pub fn sample_snuts(
    model: Arc<dyn Model>,
    cfg: &NutsConfig,
    mode: SamplingMode,
    opts: &PipelineOptions,
) -> Result<RunResult, PipelineError> {
    let plan = plan(model.clone(), cfg, mode, opts)?;
    let warmup = cfg.warmup.unwrap_or(if plan.baseline { 1000 } else { 150 });
    let adapt_mass = cfg.adapt_mass.unwrap_or(if plan.baseline { MassAdapt::Diagonal } else { MassAdapt::Off });
    cfg.validate(warmup).map_err(|e| PipelineError::Config(e.to_string()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let n = plan.model.dim();
    let chains: Vec<Result<ChainResult, PipelineError>> = pool.install(|| {
        (0..cfg.chains)
            .into_par_iter()
            .map(|c| {
                let mut target = PreconditionedTarget::new(plan.model.clone(), plan.precond.clone());
                let mut rng = chain_rng(cfg.seed, c);
                let init = match &plan.inits {
                    InitSource::Uniform => {
                        let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed).wrapping_add(c as u64));
                        pick_init(&mut target, &plan.precond, &mut |_| {
                            Some((0..n).map(|_| init_rng.random_range(-2.0..2.0)).collect())
                        })
                    }
                    InitSource::Draws(d) => {
                        let per = d.len() / cfg.chains;
                        pick_init(&mut target, &plan.precond, &mut |k| (k < per).then(|| d[c * per + k].clone()))
                    }
                }
                .map_err(|source| PipelineError::Sampling { chain: c, source })?;
                let precond = plan.precond.clone();
                let to_model = move |x: &[f64]| precond.backward(x).expect("dimensions match");
                run_chain(&mut target, init, warmup, adapt_mass, cfg, &mut rng, &to_model)
                    .map_err(|source| PipelineError::Sampling { chain: c, source })
            })
            .collect()
    });
    let chains = chains.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut timings = plan.timings;
    timings.warmup = chains.iter().map(|c| c.warmup_seconds).sum();
    timings.sample = chains.iter().map(|c| c.sampling_seconds).sum();
    Ok(RunResult {
        model: model.name().to_string(),
        mode,
        param_names: plan.model.param_names(),
        chains,
        precond: plan.precond.kind().to_string(),
        fallback: plan.fallback,
        trace: plan.trace,
        report: plan.report,
        laplace: plan.laplace,
        timings,
        warmup,
        adapt_mass,
        config: cfg.clone(),
    })
}
