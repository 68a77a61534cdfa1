//! Python bindings: build a model, fit the Laplace approximation, sample, summarize.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use snuts_core::diagnostics::{self, SummaryTable};
use snuts_core::laplace::{laplace_approx, precision_sample, LaplaceConfig, PosteriorApprox};
use snuts_core::models::{self, Model, ModelConfig};
use snuts_core::nuts::{self, NutsConfig, PipelineOptions, RunResult, SamplingMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A built-in model with its simulated data.
#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    inner: Arc<dyn Model>,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    #[getter]
    fn random_idx(&self) -> Vec<usize> {
        self.inner.random_idx().to_vec()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.inner.initial_point()
    }

    /// Returns `(log_density, gradient)` at `q`.
    fn log_density_grad(&self, q: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        if q.len() != self.inner.dim() {
            return Err(value_err(format!("expected {} values, got {}", self.inner.dim(), q.len())));
        }
        let mut g = vec![0.0; q.len()];
        let lp = self.inner.log_density_grad(&q, &mut g);
        Ok((lp, g))
    }

    fn __repr__(&self) -> String {
        format!("Model({}, dim={})", self.inner.name(), self.inner.dim())
    }
}

/// Build a model by name; `params` override its size and data settings.
#[pyfunction]
#[pyo3(signature = (name, params = None, seed = 0))]
fn build_model(name: &str, params: Option<BTreeMap<String, f64>>, seed: u64) -> PyResult<PyModel> {
    let mut cfg = ModelConfig::new(name).with_seed(seed);
    cfg.params = params.unwrap_or_default();
    let inner = models::build_model(&cfg).map_err(value_err)?;
    Ok(PyModel { inner })
}

/// Joint Gaussian approximation at the marginal posterior mode.
#[pyclass(name = "Laplace", frozen)]
pub struct PyLaplace {
    inner: PosteriorApprox,
}

#[pymethods]
impl PyLaplace {
    #[getter]
    fn q_hat(&self) -> Vec<f64> {
        self.inner.q_hat.clone()
    }

    #[getter]
    fn theta_hat(&self) -> Vec<f64> {
        self.inner.theta_hat.clone()
    }

    #[getter]
    fn factor_nnz(&self) -> usize {
        self.inner.factor.fill_count()
    }

    #[getter]
    fn jittered(&self) -> bool {
        self.inner.jittered()
    }

    /// Draws from `N(q_hat, Q^-1)`, one list per draw.
    #[pyo3(signature = (n, seed = 1))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        precision_sample(&self.inner, n, seed)
    }

    /// Precision matrix as `(rows, cols, values)` of the lower triangle.
    fn precision_triplets(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        let q = &self.inner.q;
        for j in 0..q.dim() {
            for (i, v) in q.column(j) {
                out.0.push(i);
                out.1.push(j);
                out.2.push(v);
            }
        }
        out
    }
}

#[pyfunction]
fn laplace(model: &PyModel) -> PyResult<PyLaplace> {
    let inner = laplace_approx(model.inner.clone(), &LaplaceConfig::default()).map_err(runtime_err)?;
    Ok(PyLaplace { inner })
}

/// Result of one multi-chain run.
#[pyclass(name = "Run", frozen)]
pub struct PyRun {
    inner: RunResult,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn precond(&self) -> String {
        self.inner.precond.clone()
    }

    #[getter]
    fn fallback(&self) -> Option<String> {
        self.inner.fallback.clone()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.param_names.clone()
    }

    #[getter]
    fn total_time(&self) -> f64 {
        self.inner.total_time()
    }

    #[getter]
    fn divergences(&self) -> usize {
        self.inner.divergences()
    }

    #[getter]
    fn mean_leapfrog(&self) -> f64 {
        self.inner.mean_leapfrog()
    }

    /// Draws as `[chain][iteration][param]`.
    fn draws(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.chains.iter().map(|c| c.draws.clone()).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (model, mode = "snuts-auto", chains = 4, warmup = None, iter = 1000, seed = 1, jobs = 0))]
fn sample(
    py: Python<'_>,
    model: &PyModel,
    mode: &str,
    chains: usize,
    warmup: Option<usize>,
    iter: usize,
    seed: u64,
    jobs: usize,
) -> PyResult<PyRun> {
    let mode: SamplingMode = mode.parse().map_err(value_err)?;
    let cfg = NutsConfig { chains, warmup, iter, seed, ..NutsConfig::default() };
    let opts = PipelineOptions { jobs, ..PipelineOptions::default() };
    let m = model.inner.clone();
    let inner = py.allow_threads(|| nuts::sample_snuts(m, &cfg, mode, &opts)).map_err(runtime_err)?;
    Ok(PyRun { inner })
}

fn table_to_dict<'py>(py: Python<'py>, t: &SummaryTable) -> PyResult<Bound<'py, PyDict>> {
    let rows = PyDict::new(py);
    for r in &t.rows {
        let d = PyDict::new(py);
        d.set_item("mean", r.mean)?;
        d.set_item("sd", r.sd)?;
        d.set_item("ess_bulk", r.ess_bulk)?;
        d.set_item("rhat", r.rhat)?;
        rows.set_item(&r.name, d)?;
    }
    let out = PyDict::new(py);
    out.set_item("params", rows)?;
    out.set_item("min_ess", t.min_ess)?;
    out.set_item("total_time", t.total_time)?;
    out.set_item("efficiency", t.efficiency)?;
    out.set_item("max_rhat", t.max_rhat)?;
    out.set_item("divergences", t.divergences)?;
    Ok(out)
}

/// Per-parameter bulk ESS and split R-hat plus run-level efficiency.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, run: &PyRun) -> PyResult<Bound<'py, PyDict>> {
    let t = diagnostics::summarize(&run.inner).map_err(runtime_err)?;
    table_to_dict(py, &t)
}

/// Exact 1-D Wasserstein-1 distance between two samples.
#[pyfunction]
fn wasserstein1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    diagnostics::wasserstein1d(&a, &b).map_err(value_err)
}

#[pymodule]
pub fn snuts(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyLaplace>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(build_model, m)?)?;
    m.add_function(wrap_pyfunction!(laplace, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1d, m)?)?;
    m.add("__version__", snuts_core::experiment::VERSION)?;
    Ok(())
}
