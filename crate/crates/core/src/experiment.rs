//! Experiment configs, run artifacts on disk and the benchmark runners
//! behind the command-line subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::diagnostics::{mean_max, summarize, summarize_columns, wasserstein_per_dim, DiagnosticsError, SummaryTable};
use crate::laplace::{laplace_approx, precision_sample, LaplaceConfig, LaplaceError};
use crate::models::{build_model, Model, ModelConfig, ModelError};
use crate::nuts::{sample_snuts, NutsConfig, PipelineError, PipelineOptions, RunResult, SamplingMode};
use crate::precondition::{build_preconditioner, gradient_cost, SelectorConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("Laplace approximation failed: {0}")]
    Laplace(#[from] LaplaceError),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("cannot write output: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<PipelineError> for ExperimentError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => Self::Config(m),
            PipelineError::Laplace(l) => Self::Laplace(l),
            other => Self::Sampling(other.to_string()),
        }
    }
}

impl ExperimentError {
    /// Process exit code: 2 configuration, 3 model or Laplace, 4 sampling.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io(_) | Self::Json(_) | Self::Csv(_) => 2,
            Self::Model(_) | Self::Laplace(_) => 3,
            Self::Sampling(_) | Self::Diagnostics(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// One experiment as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub modes: Vec<SamplingMode>,
    pub nuts: NutsConfig,
    pub replicates: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub laplace: LaplaceConfig,
    pub selector: SelectorConfig,
    /// Model parameter varied by `scale` and `gradbench`.
    pub size_param: Option<String>,
    pub sizes: Vec<f64>,
    /// Draw counts for `approx`.
    pub reference_draws: usize,
    pub approx_draws: usize,
    /// Replays a recorded automatic choice.
    pub precond_override: Option<String>,
    pub fallback_override: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new("eight_schools_nc"),
            modes: vec![SamplingMode::SnutsAuto],
            nuts: NutsConfig::default(),
            replicates: 3,
            out: PathBuf::from("out"),
            seed: 1,
            jobs: 0,
            laplace: LaplaceConfig::default(),
            selector: SelectorConfig::default(),
            size_param: None,
            sizes: Vec::new(),
            reference_draws: 10_000,
            approx_draws: 1000,
            precond_override: None,
            fallback_override: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(ExperimentError::Config("at least one mode is required".into()));
        }
        if self.replicates == 0 {
            return Err(ExperimentError::Config("replicates must be at least 1".into()));
        }
        if !self.sizes.is_empty() && self.size_param.is_none() {
            return Err(ExperimentError::Config("sizes given without size_param".into()));
        }
        Ok(())
    }

    /// Reads an experiment config, or the `config` block of a run's
    /// `meta.json`.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| ExperimentError::Config(format!("invalid JSON: {e}")))?;
        let v = match v.get("config") {
            Some(inner) if v.get("library_version").is_some() => inner.clone(),
            _ => v,
        };
        serde_json::from_value(v).map_err(|e| ExperimentError::Config(format!("invalid config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    /// Seed of replicate `r`; chains within it use `seed + chain`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(1000 * r as u64)
    }

    fn options(&self) -> PipelineOptions {
        PipelineOptions {
            laplace: self.laplace.clone(),
            selector: self.selector.clone(),
            jobs: self.jobs,
            precond_override: self.precond_override.clone(),
            fallback_override: self.fallback_override,
        }
    }

    fn model_at(&self, size: Option<f64>) -> ModelConfig {
        let mut m = self.model.clone();
        if let (Some(k), Some(s)) = (&self.size_param, size) {
            m.params.insert(k.clone(), s);
        }
        m
    }

    /// The config that reproduces one run exactly.
    fn replay_config(&self, model: &ModelConfig, mode: SamplingMode, seed: u64, run: &RunResult, out: &Path) -> Self {
        Self {
            model: model.clone(),
            modes: vec![mode],
            replicates: 1,
            seed,
            out: out.to_path_buf(),
            size_param: None,
            sizes: Vec::new(),
            precond_override: (mode == SamplingMode::SnutsAuto || mode == SamplingMode::ElaSnuts)
                .then(|| run.precond.clone())
                .filter(|_| run.fallback.is_none()),
            fallback_override: run.fallback.is_some(),
            ..self.clone()
        }
    }
}

/// Artifacts of one run.
#[derive(Debug)]
pub struct RunRecord {
    pub mode: SamplingMode,
    pub replicate: usize,
    pub seed: u64,
    pub size: Option<f64>,
    pub dir: PathBuf,
    pub outcome: std::result::Result<(RunResult, SummaryTable), String>,
    pub exit_code: i32,
}

fn write_draws(path: &Path, run: &RunResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(run.param_names.iter().cloned());
    header.push("lp__".into());
    w.write_record(&header)?;
    for (c, chain) in run.chains.iter().enumerate() {
        for (i, (d, lp)) in chain.draws.iter().zip(&chain.lp).enumerate() {
            let mut rec = vec![c.to_string(), (i + 1).to_string()];
            rec.extend(d.iter().map(|v| v.to_string()));
            rec.push(lp.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_stats(path: &Path, run: &RunResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["chain", "iteration", "leapfrog", "depth", "divergent", "energy", "accept"])?;
    for (c, chain) in run.chains.iter().enumerate() {
        for (i, s) in chain.stats.iter().enumerate() {
            w.write_record([
                c.to_string(),
                (i + 1).to_string(),
                s.leapfrog.to_string(),
                s.depth.to_string(),
                u8::from(s.divergent).to_string(),
                s.energy.to_string(),
                s.accept.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_meta(cfg: &ExperimentConfig, command: &str, run: &RunResult, summary: &SummaryTable, replicate: usize) -> Value {
    json!({
        "library_version": VERSION,
        "command": command,
        "config": cfg,
        "replicate": replicate,
        "model": run.model,
        "mode": run.mode,
        "precond": run.precond,
        "fallback": run.fallback,
        "trace": run.trace,
        "report": run.report,
        "laplace": run.laplace,
        "warmup": run.warmup,
        "adapt_mass": run.adapt_mass,
        "chain_seeds": (0..run.chains.len()).map(|c| run.config.seed.wrapping_add(c as u64)).collect::<Vec<_>>(),
        "step_sizes": run.chains.iter().map(|c| c.step_size).collect::<Vec<_>>(),
        "timings": run.timings,
        "total_time": summary.total_time,
        "min_ess": summary.min_ess,
        "efficiency": summary.efficiency,
        "mean_leapfrog": summary.mean_leapfrog,
        "max_depth_hits": run.max_depth_hits(),
        "divergences": summary.divergences,
        "max_rhat": summary.max_rhat,
        "undefined_ess": summary.undefined_ess,
    })
}

/// Writes `draws.csv`, `stats.csv`, `summary.csv` and `meta.json`.
pub fn write_run(dir: &Path, run: &RunResult, summary: &SummaryTable, meta: &Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_draws(&dir.join("draws.csv"), run)?;
    write_stats(&dir.join("stats.csv"), run)?;
    summary.write_csv(&dir.join("summary.csv"))?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn run_dir(cfg: &ExperimentConfig, mode: SamplingMode, replicate: usize, size: Option<f64>) -> PathBuf {
    let mut d = cfg.out.clone();
    if let Some(s) = size {
        d = d.join(format!("{}_{s}", cfg.size_param.as_deref().unwrap_or("size")));
    }
    d.join(mode.as_str()).join(format!("rep{replicate}"))
}

fn one_run(
    cfg: &ExperimentConfig,
    command: &str,
    model_cfg: &ModelConfig,
    model: &Arc<dyn Model>,
    mode: SamplingMode,
    replicate: usize,
    size: Option<f64>,
) -> RunRecord {
    let seed = if cfg.replicates == 1 && replicate == 0 { cfg.seed } else { cfg.replicate_seed(replicate) };
    let dir = if cfg.replicates == 1 && cfg.modes.len() == 1 && size.is_none() {
        cfg.out.clone()
    } else {
        run_dir(cfg, mode, replicate, size)
    };
    let nuts = NutsConfig { seed, ..cfg.nuts.clone() };
    let attempt = || -> Result<(RunResult, SummaryTable)> {
        let run = sample_snuts(model.clone(), &nuts, mode, &cfg.options())?;
        let summary = summarize(&run)?;
        let replay = cfg.replay_config(model_cfg, mode, seed, &run, &dir);
        write_run(&dir, &run, &summary, &run_meta(&replay, command, &run, &summary, replicate))?;
        Ok((run, summary))
    };
    match attempt() {
        Ok(ok) => RunRecord { mode, replicate, seed, size, dir, outcome: Ok(ok), exit_code: 0 },
        Err(e) => {
            log::error!("{} {mode} replicate {replicate}: {e}", model_cfg.name);
            RunRecord { mode, replicate, seed, size, dir, exit_code: e.exit_code(), outcome: Err(e.to_string()) }
        }
    }
}

fn all_runs(cfg: &ExperimentConfig, command: &str, size: Option<f64>) -> Result<Vec<RunRecord>> {
    let model_cfg = cfg.model_at(size);
    let model = build_model(&model_cfg)?;
    let mut out = Vec::new();
    for r in 0..cfg.replicates {
        for &mode in &cfg.modes {
            out.push(one_run(cfg, command, &model_cfg, &model, mode, r, size));
        }
    }
    Ok(out)
}

/// `sample`: every mode × replicate, failing on the first error.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let runs = all_runs(cfg, "sample", None)?;
    if let Some(bad) = runs.iter().find(|r| r.outcome.is_err()) {
        let msg = bad.outcome.as_ref().err().cloned().unwrap_or_default();
        return Err(match bad.exit_code {
            3 => ExperimentError::Laplace(LaplaceError::NoInteriorMode(msg)),
            2 => ExperimentError::Config(msg),
            _ => ExperimentError::Sampling(msg),
        });
    }
    Ok(runs)
}

/// One row of a comparison or scaling table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub size: Option<f64>,
    pub mode: SamplingMode,
    pub replicate: usize,
    pub seed: u64,
    pub status: String,
    pub precond: String,
    pub total_time: f64,
    pub overhead_time: f64,
    pub min_ess: f64,
    pub efficiency: f64,
    pub mean_leapfrog: f64,
    pub divergences: usize,
    /// Efficiency over the `stan_default` row of the same replicate and size.
    pub rel_efficiency: f64,
}

fn rows_from(model: &str, runs: &[RunRecord]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = runs
        .iter()
        .map(|r| match &r.outcome {
            Ok((run, s)) => CompareRow {
                model: model.to_string(),
                size: r.size,
                mode: r.mode,
                replicate: r.replicate,
                seed: r.seed,
                status: run.fallback.as_ref().map_or("ok".into(), |f| format!("fallback:{f}")),
                precond: run.precond.clone(),
                total_time: s.total_time,
                overhead_time: run.timings.overhead(),
                min_ess: s.min_ess,
                efficiency: s.efficiency,
                mean_leapfrog: s.mean_leapfrog,
                divergences: s.divergences,
                rel_efficiency: f64::NAN,
            },
            Err(e) => CompareRow {
                model: model.to_string(),
                size: r.size,
                mode: r.mode,
                replicate: r.replicate,
                seed: r.seed,
                status: format!("error: {e}"),
                precond: String::new(),
                total_time: f64::NAN,
                overhead_time: f64::NAN,
                min_ess: f64::NAN,
                efficiency: f64::NAN,
                mean_leapfrog: f64::NAN,
                divergences: 0,
                rel_efficiency: f64::NAN,
            },
        })
        .collect();
    let base: BTreeMap<(usize, String), f64> = rows
        .iter()
        .filter(|r| r.mode == SamplingMode::StanDefault)
        .map(|r| ((r.replicate, format!("{:?}", r.size)), r.efficiency))
        .collect();
    for r in rows.iter_mut() {
        if let Some(b) = base.get(&(r.replicate, format!("{:?}", r.size))) {
            r.rel_efficiency = r.efficiency / b;
        }
    }
    rows
}

pub fn write_rows(path: &Path, rows: &[CompareRow]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model", "size", "mode", "replicate", "seed", "status", "precond", "total_time", "overhead_time", "min_ess",
        "efficiency", "mean_leapfrog", "divergences", "rel_efficiency",
    ])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.size.map_or(String::new(), |s| s.to_string()),
            r.mode.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            r.precond.clone(),
            r.total_time.to_string(),
            r.overhead_time.to_string(),
            r.min_ess.to_string(),
            r.efficiency.to_string(),
            r.mean_leapfrog.to_string(),
            r.divergences.to_string(),
            r.rel_efficiency.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `compare`: efficiency table across modes; failed runs become rows.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    if cfg.modes.len() < 2 {
        return Err(ExperimentError::Config("compare needs at least two modes".into()));
    }
    let runs = all_runs(cfg, "compare", None)?;
    let rows = rows_from(&cfg.model.name, &runs);
    write_rows(&cfg.out.join("compare.csv"), &rows)?;
    Ok(rows)
}

/// `scale`: the comparison repeated over a size grid.
pub fn cmd_scale(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    if cfg.sizes.is_empty() {
        return Err(ExperimentError::Config("scale needs a nonempty size grid".into()));
    }
    let mut rows = Vec::new();
    for &s in &cfg.sizes {
        match all_runs(cfg, "scale", Some(s)) {
            Ok(runs) => rows.extend(rows_from(&cfg.model.name, &runs)),
            Err(e) => rows.extend(cfg.modes.iter().map(|&mode| CompareRow {
                model: cfg.model.name.clone(),
                size: Some(s),
                mode,
                replicate: 0,
                seed: cfg.seed,
                status: format!("error: {e}"),
                precond: String::new(),
                total_time: f64::NAN,
                overhead_time: f64::NAN,
                min_ess: f64::NAN,
                efficiency: f64::NAN,
                mean_leapfrog: f64::NAN,
                divergences: 0,
                rel_efficiency: f64::NAN,
            })),
        }
    }
    write_rows(&cfg.out.join("scale.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradBenchRow {
    pub size: Option<f64>,
    pub dim: usize,
    pub precond: String,
    pub raw: f64,
    pub transformed: f64,
    pub transform_only: f64,
    pub ratio: f64,
}

/// `gradbench`: transformed-gradient cost relative to the raw gradient.
pub fn cmd_gradbench(cfg: &ExperimentConfig) -> Result<Vec<GradBenchRow>> {
    let sizes: Vec<Option<f64>> = if cfg.sizes.is_empty() { vec![None] } else { cfg.sizes.iter().map(|&s| Some(s)).collect() };
    let mut rows = Vec::new();
    for size in sizes {
        let model = build_model(&cfg.model_at(size))?;
        let a = laplace_approx(model.clone(), &cfg.laplace)?;
        for kind in ["identity", "diag", "dense", "sparse"] {
            let row = match build_preconditioner(kind, &a, &cfg.selector) {
                Ok(p) => {
                    let c = gradient_cost(&p, &model, &a.q_hat, 21);
                    GradBenchRow {
                        size,
                        dim: a.dim(),
                        precond: kind.into(),
                        raw: c.raw,
                        transformed: c.transformed,
                        transform_only: c.transform_only,
                        ratio: c.ratio(),
                    }
                }
                Err(_) => GradBenchRow {
                    size,
                    dim: a.dim(),
                    precond: kind.into(),
                    raw: f64::NAN,
                    transformed: f64::NAN,
                    transform_only: f64::NAN,
                    ratio: f64::NAN,
                },
            };
            rows.push(row);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join("gradbench.csv"))?;
    w.write_record(["model", "size", "dim", "precond", "raw", "transformed", "transform_only", "ratio"])?;
    for r in &rows {
        w.write_record([
            cfg.model.name.clone(),
            r.size.map_or(String::new(), |s| s.to_string()),
            r.dim.to_string(),
            r.precond.clone(),
            r.raw.to_string(),
            r.transformed.to_string(),
            r.transform_only.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub name: String,
    /// Precision-sample draws against the reference.
    pub w_precision: f64,
    /// A fresh NUTS batch of the same size against the reference.
    pub w_nuts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub model: String,
    pub status: String,
    pub rows: Vec<ApproxRow>,
    pub w_precision_mean: f64,
    pub w_precision_max: f64,
    pub w_nuts_mean: f64,
    pub w_nuts_max: f64,
    pub approx_seconds: f64,
    pub reference_seconds: f64,
}

fn pooled(run: &RunResult) -> Vec<Vec<f64>> {
    run.chains.iter().flat_map(|c| c.draws.iter().cloned()).collect()
}

/// `approx`: scores precision sampling against a long reference run.
pub fn cmd_approx(cfg: &ExperimentConfig) -> Result<ApproxReport> {
    let model = build_model(&cfg.model)?;
    let chains = cfg.nuts.chains.max(1);
    let mode = cfg.modes.first().copied().unwrap_or(SamplingMode::SnutsAuto);
    let t = Instant::now();
    let approx = laplace_approx(model.clone(), &cfg.laplace);
    let approx = match approx {
        Ok(a) => a,
        Err(e) => {
            let report = ApproxReport {
                model: cfg.model.name.clone(),
                status: format!("laplace_failed: {e}"),
                rows: Vec::new(),
                w_precision_mean: f64::NAN,
                w_precision_max: f64::NAN,
                w_nuts_mean: f64::NAN,
                w_nuts_max: f64::NAN,
                approx_seconds: f64::NAN,
                reference_seconds: f64::NAN,
            };
            write_approx(cfg, &report)?;
            return Ok(report);
        }
    };
    let draws = precision_sample(&approx, cfg.approx_draws, cfg.seed.wrapping_add(7));
    let approx_seconds = t.elapsed().as_secs_f64();

    let reference_cfg = NutsConfig { iter: cfg.reference_draws.div_ceil(chains), chains, seed: cfg.seed, ..cfg.nuts.clone() };
    let reference = sample_snuts(model.clone(), &reference_cfg, mode, &cfg.options())?;
    let batch_cfg = NutsConfig { iter: cfg.approx_draws.div_ceil(chains), chains, seed: cfg.seed.wrapping_add(500), ..cfg.nuts.clone() };
    let batch = sample_snuts(model.clone(), &batch_cfg, mode, &cfg.options())?;
    let reference_draws = pooled(&reference);
    let wp = wasserstein_per_dim(&draws, &reference_draws)?;
    let wn = wasserstein_per_dim(&pooled(&batch), &reference_draws)?;
    let names = model.param_names();
    let rows: Vec<ApproxRow> = names
        .iter()
        .zip(wp.iter().zip(&wn))
        .map(|(n, (&a, &b))| ApproxRow { name: n.clone(), w_precision: a, w_nuts: b })
        .collect();
    let (pm, px) = mean_max(&wp);
    let (nm, nx) = mean_max(&wn);
    let report = ApproxReport {
        model: cfg.model.name.clone(),
        status: "ok".into(),
        rows,
        w_precision_mean: pm,
        w_precision_max: px,
        w_nuts_mean: nm,
        w_nuts_max: nx,
        approx_seconds,
        reference_seconds: reference.total_time(),
    };
    write_approx(cfg, &report)?;
    Ok(report)
}

fn write_approx(cfg: &ExperimentConfig, report: &ApproxReport) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join("approx.csv"))?;
    w.write_record(["model", "status", "name", "w_precision", "w_nuts"])?;
    for r in &report.rows {
        w.write_record([report.model.clone(), report.status.clone(), r.name.clone(), r.w_precision.to_string(), r.w_nuts.to_string()])?;
    }
    for (name, a, b) in [
        ("mean", report.w_precision_mean, report.w_nuts_mean),
        ("max", report.w_precision_max, report.w_nuts_max),
    ] {
        w.write_record([report.model.clone(), report.status.clone(), name.to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    let meta = json!({
        "library_version": VERSION,
        "command": "approx",
        "config": cfg,
        "report": report,
    });
    fs::write(cfg.out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// `diagnose`: recomputes `summary.csv` from an existing `draws.csv` (and
/// the timings in `meta.json` when present).
pub fn cmd_diagnose(dir: &Path) -> Result<SummaryTable> {
    let mut rdr = csv::Reader::from_path(dir.join("draws.csv"))
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", dir.join("draws.csv").display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header.len() < 3 || header[0] != "chain" || header[1] != "iteration" {
        return Err(ExperimentError::Config("draws.csv must start with chain,iteration".into()));
    }
    let names: Vec<String> = header[2..].to_vec();
    let mut columns: Vec<Vec<Vec<f64>>> = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let chain: usize = rec[0].parse().map_err(|_| ExperimentError::Config(format!("bad chain `{}`", &rec[0])))?;
        for (k, col) in columns.iter_mut().enumerate() {
            while col.len() <= chain {
                col.push(Vec::new());
            }
            let v: f64 = rec[k + 2].parse().map_err(|_| ExperimentError::Config(format!("bad value `{}`", &rec[k + 2])))?;
            col[chain].push(v);
        }
    }
    let meta: Option<Value> = fs::read_to_string(dir.join("meta.json")).ok().and_then(|s| serde_json::from_str(&s).ok());
    let total = meta.as_ref().and_then(|m| m["total_time"].as_f64()).unwrap_or(f64::NAN);
    let (leap, div) = read_stats(&dir.join("stats.csv")).unwrap_or((f64::NAN, 0));
    let table = summarize_columns(&names, &columns, total, leap, div)?;
    table.write_csv(&dir.join("summary.csv"))?;
    Ok(table)
}

fn read_stats(path: &Path) -> Result<(f64, usize)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let (mut s, mut n, mut d) = (0.0, 0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec?;
        s += rec[2].parse::<f64>().unwrap_or(f64::NAN);
        d += usize::from(&rec[4] == "1");
        n += 1;
    }
    Ok((s / n.max(1) as f64, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig::new("eight_schools_nc"),
            modes: vec![SamplingMode::SnutsAuto],
            nuts: NutsConfig { chains: 2, iter: 100, ..Default::default() },
            replicates: 1,
            out: dir.to_path_buf(),
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig {
            sizes: vec![8.0, 16.0],
            size_param: Some("side".into()),
            modes: vec![SamplingMode::StanDefault, SamplingMode::ElaSnuts],
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&s).unwrap(), cfg);
        let partial = ExperimentConfig::from_json_str(r#"{"model": {"name": "funnel"}, "modes": ["stan_default"]}"#).unwrap();
        assert_eq!(partial.replicates, 3);
        assert!(ExperimentConfig { modes: vec![], ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { replicates: 0, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig::from_json_str("{").is_err());
    }

    #[test]
    fn sample_writes_artifacts_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let runs = cmd_sample(&cfg).unwrap();
        assert_eq!(runs.len(), 1);
        for f in ["draws.csv", "stats.csv", "summary.csv", "meta.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["precond"], "diag");
        let first = fs::read(dir.path().join("draws.csv")).unwrap();

        let replay_dir = tempfile::tempdir().unwrap();
        let mut replay = ExperimentConfig::from_path(&dir.path().join("meta.json")).unwrap();
        replay.out = replay_dir.path().to_path_buf();
        cmd_sample(&replay).unwrap();
        assert_eq!(first, fs::read(replay_dir.path().join("draws.csv")).unwrap());

        let summary = fs::read(dir.path().join("summary.csv")).unwrap();
        cmd_diagnose(dir.path()).unwrap();
        assert_eq!(summary, fs::read(dir.path().join("summary.csv")).unwrap());
    }

    #[test]
    fn draws_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        cmd_sample(&small(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("draws.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "chain,iteration,eta[1],eta[2],eta[3],eta[4],eta[5],eta[6],eta[7],eta[8],mu,logtau,lp__");
        assert_eq!(lines.count(), 200);
        let stats = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
        assert!(stats.starts_with("chain,iteration,leapfrog,depth,divergent,energy,accept\n"));
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("name,mean,sd,ess_bulk,rhat\n"));
    }

    #[test]
    fn compare_rows_and_relative_column() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            modes: vec![SamplingMode::StanDefault, SamplingMode::SnutsAuto],
            nuts: NutsConfig { chains: 2, iter: 100, warmup: Some(100), ..Default::default() },
            replicates: 2,
            ..small(dir.path())
        };
        let rows = cmd_compare(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            let base = rows.iter().find(|b| b.replicate == r.replicate && b.mode == SamplingMode::StanDefault).unwrap();
            assert_eq!(r.rel_efficiency, r.efficiency / base.efficiency);
        }
        let mut rdr = csv::Reader::from_path(dir.path().join("compare.csv")).unwrap();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let eff: f64 = rec[10].parse().unwrap();
            let rel: f64 = rec[13].parse().unwrap();
            let base: f64 = rows.iter().find(|b| b.replicate.to_string() == rec[3] && b.mode == SamplingMode::StanDefault).unwrap().efficiency;
            assert_eq!(rel, eff / base);
        }
        assert!(cmd_compare(&small(dir.path())).is_err());
    }

    #[test]
    fn failures_become_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            model: ModelConfig::new("funnel"),
            modes: vec![SamplingMode::StanDefault, SamplingMode::SnutsSparse],
            nuts: NutsConfig { chains: 1, iter: 50, warmup: Some(50), ..Default::default() },
            replicates: 1,
            ..small(dir.path())
        };
        let rows = cmd_compare(&cfg).unwrap();
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("error"));
        let err = cmd_sample(&ExperimentConfig { modes: vec![SamplingMode::SnutsSparse], ..cfg }).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn single_point_scale_and_gradbench() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            model: ModelConfig::new("gmrf_poisson_lattice"),
            modes: vec![SamplingMode::StanDefault, SamplingMode::SnutsSparse],
            nuts: NutsConfig { chains: 1, iter: 50, warmup: Some(50), ..Default::default() },
            replicates: 1,
            size_param: Some("side".into()),
            sizes: vec![4.0],
            ..small(dir.path())
        };
        let rows = cmd_scale(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(dir.path().join("scale.csv").exists());
        let g = cmd_gradbench(&cfg).unwrap();
        assert_eq!(g.len(), 4);
        let id = g.iter().find(|r| r.precond == "identity").unwrap();
        assert!(id.ratio > 0.5 && id.ratio < 2.0, "{}", id.ratio);
    }

    #[test]
    fn approx_flags_funnel() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { model: ModelConfig::new("funnel"), ..small(dir.path()) };
        let r = cmd_approx(&cfg).unwrap();
        assert!(r.status.starts_with("laplace_failed"));
    }

    #[test]
    fn approx_on_exact_gaussian() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            model: ModelConfig::new("bivariate_normal").with("rho", 0.5),
            nuts: NutsConfig { chains: 4, ..Default::default() },
            reference_draws: 4000,
            approx_draws: 1000,
            ..small(dir.path())
        };
        let r = cmd_approx(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.w_precision_mean <= 2.0 * r.w_nuts_mean.max(0.02), "{r:?}");
    }
}
