//! Model abstraction and the model zoo.
//!
//! A model is an unnormalized log posterior over `q = (u, θ)` with an analytic
//! gradient, a declared split into random effects `u` and fixed effects `θ`,
//! and the sparse Hessian of the negative log posterior over `u`.

mod bivariate;
mod dataset;
mod eight_schools;
mod funnel;
mod gaussian;
mod gmrf;
mod linear_gaussian;
mod nb_glmm;
mod regression;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::SparseSymMatrix;

pub use bivariate::BivariateNormal;
pub use dataset::{Dataset, DatasetSpec};
pub use eight_schools::EightSchoolsNc;
pub use funnel::Funnel;
pub use gaussian::Ar1Gaussian;
pub use gmrf::GmrfPoissonLattice;
pub use linear_gaussian::{LinearGaussian, RandomStructure};
pub use nb_glmm::NbGlmm;
pub use regression::CorrelatedRegression;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("log density is not finite at {0:?}")]
    NonFinite(Vec<f64>),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn param_names(&self) -> Vec<String>;

    /// Indices of the random effects `u` (empty when there are none).
    fn random_idx(&self) -> &[usize];

    /// Indices of the fixed effects `θ`.
    fn fixed_idx(&self) -> &[usize];

    /// Log density and its gradient (written to `grad`).
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, q: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_grad(q, &mut g)
    }

    /// Hessian of `-log_density` over the random effects, indexed in
    /// `random_idx` order. The pattern must not depend on `q`.
    fn hessian_uu(&self, _q: &[f64]) -> Option<SparseSymMatrix> {
        None
    }

    /// Analytic cross block of the Hessian of `-log_density` as
    /// `(position in random_idx, position in fixed_idx, value)`. `None` means
    /// the caller should difference the gradient instead.
    fn cross_hessian(&self, _q: &[f64]) -> Option<Vec<(usize, usize, f64)>> {
        None
    }

    fn initial_point(&self) -> Vec<f64>;

    fn dataset(&self) -> Option<&Dataset> {
        None
    }

    /// Exact posterior mean and covariance, for targets where they are known.
    fn exact_moments(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        None
    }
}

/// Largest absolute difference between the analytic gradient and central
/// differences with step `h`.
pub fn check_gradient(model: &dyn Model, q: &[f64], h: f64) -> Result<f64, ModelError> {
    let n = model.dim();
    let mut grad = vec![0.0; n];
    let f0 = model.log_density_grad(q, &mut grad);
    if !f0.is_finite() {
        return Err(ModelError::NonFinite(q.to_vec()));
    }
    let mut x = q.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..n {
        x[i] = q[i] + h;
        let fp = model.log_density(&x);
        x[i] = q[i] - h;
        let fm = model.log_density(&x);
        x[i] = q[i];
        if !fp.is_finite() || !fm.is_finite() {
            let mut bad = q.to_vec();
            bad[i] += if fp.is_finite() { -h } else { h };
            return Err(ModelError::NonFinite(bad));
        }
        worst = worst.max(((fp - fm) / (2.0 * h) - grad[i]).abs());
    }
    Ok(worst)
}

/// Model name plus numeric parameters, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), params: BTreeMap::new(), seed: 0 }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn get_usize(&self, key: &str, default: usize) -> Result<usize, ModelError> {
        let v = self.get(key, default as f64);
        if v < 0.0 || v.fract() != 0.0 {
            return Err(ModelError::InvalidParameter(format!("{key} must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), ModelError> {
        for key in self.params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ModelError::InvalidParameter(format!(
                    "model `{}` has no parameter `{key}` (expected one of {allowed:?})",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Names accepted by [`build_model`].
pub const MODEL_NAMES: [&str; 9] = [
    "bivariate_normal",
    "gaussian",
    "correlated_regression",
    "eight_schools_nc",
    "gmrf_poisson_lattice",
    "nb_glmm",
    "funnel",
    "linear_gaussian",
    "linear_gaussian_rw",
];

/// Builds a zoo model from its registry name and parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<Arc<dyn Model>, ModelError> {
    let model: Arc<dyn Model> = match cfg.name.as_str() {
        "bivariate_normal" => {
            cfg.check_keys(&["tau", "rho"])?;
            Arc::new(BivariateNormal::new(cfg.get("tau", 1.0), cfg.get("rho", 0.0))?)
        }
        "gaussian" => {
            cfg.check_keys(&["dim", "rho", "scale_ratio"])?;
            Arc::new(Ar1Gaussian::new(cfg.get_usize("dim", 10)?, cfg.get("rho", 0.5), cfg.get("scale_ratio", 1.0))?)
        }
        "correlated_regression" => {
            cfg.check_keys(&["n", "x_offset"])?;
            Arc::new(CorrelatedRegression::new(cfg.get_usize("n", 100)?, cfg.get("x_offset", 2000.0), cfg.seed)?)
        }
        "eight_schools_nc" => {
            cfg.check_keys(&[])?;
            Arc::new(EightSchoolsNc::new())
        }
        "gmrf_poisson_lattice" => {
            cfg.check_keys(&["side", "kappa", "tau"])?;
            let side = cfg.get_usize("side", 8)?;
            // Refining a fixed domain: the nugget shrinks with the cell area,
            // so the correlation length in cells grows with the side.
            let tau = cfg.get("tau", 6.4 / (side.max(1) * side.max(1)) as f64);
            Arc::new(GmrfPoissonLattice::new(side, cfg.get("kappa", 1.0), tau, cfg.seed)?)
        }
        "nb_glmm" => {
            cfg.check_keys(&["groups", "per_group"])?;
            Arc::new(NbGlmm::new(cfg.get_usize("groups", 23)?, cfg.get_usize("per_group", 8)?, cfg.seed)?)
        }
        "funnel" => {
            cfg.check_keys(&["dim"])?;
            Arc::new(Funnel::new(cfg.get_usize("dim", 10)?)?)
        }
        "linear_gaussian" | "linear_gaussian_rw" | "linear_gaussian_slope" => {
            cfg.check_keys(&["groups", "per_group", "n_fixed", "sigma", "tau"])?;
            let structure = match cfg.name.as_str() {
                "linear_gaussian" => RandomStructure::Intercepts,
                "linear_gaussian_rw" => RandomStructure::RandomWalk,
                _ => RandomStructure::InterceptSlope,
            };
            Arc::new(LinearGaussian::new(
                structure,
                cfg.get_usize("groups", 8)?,
                cfg.get_usize("per_group", 5)?,
                cfg.get_usize("n_fixed", 2)?,
                cfg.get("sigma", 1.0),
                cfg.get("tau", 1.0),
                cfg.seed,
            )?)
        }
        other => return Err(ModelError::UnknownModel(other.to_string())),
    };
    Ok(model)
}

/// Sum of `-½ x²/s²` prior terms, accumulating the gradient.
pub(crate) fn normal_prior(x: f64, sd: f64, grad: &mut f64) -> f64 {
    *grad -= x / (sd * sd);
    -0.5 * x * x / (sd * sd)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random points around the initial point.
    pub fn random_points(model: &dyn Model, count: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q0 = model.initial_point();
        (0..count)
            .map(|_| q0.iter().map(|&v| v + spread * (rng.random::<f64>() * 2.0 - 1.0)).collect())
            .collect()
    }

    /// Gradient check at the tolerance every zoo model must meet.
    pub fn assert_gradient_ok(model: &dyn Model, points: &[Vec<f64>]) {
        for q in points {
            let mut g = vec![0.0; model.dim()];
            model.log_density_grad(q, &mut g);
            let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let h = 1e-5 * (1.0 + q.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
            let err = check_gradient(model, q, h).unwrap();
            let tol = 1e-5_f64.max(1e-4 * gmax);
            assert!(err < tol, "{}: gradient error {err:e} > {tol:e} at {q:?}", model.name());
        }
    }

    /// Compares `hessian_uu` against differences of the analytic gradient.
    pub fn assert_hessian_uu_ok(model: &dyn Model, points: &[Vec<f64>]) {
        let r = model.random_idx().to_vec();
        for q in points {
            let h_an = model.hessian_uu(q).expect("model has random effects");
            let mut x = q.clone();
            let mut gp = vec![0.0; model.dim()];
            let mut gm = vec![0.0; model.dim()];
            let scale = h_an.max_abs_diag().max(1.0);
            for (b, &j) in r.iter().enumerate() {
                let h = 1e-5 * (1.0 + q[j].abs());
                x[j] = q[j] + h;
                model.log_density_grad(&x, &mut gp);
                x[j] = q[j] - h;
                model.log_density_grad(&x, &mut gm);
                x[j] = q[j];
                for (a, &i) in r.iter().enumerate() {
                    let fd = -(gp[i] - gm[i]) / (2.0 * h);
                    let an = h_an.get(a, b);
                    assert!(
                        (fd - an).abs() <= 1e-4 * scale,
                        "{}: H_uu[{a},{b}] analytic {an} vs fd {fd}",
                        model.name()
                    );
                }
            }
        }
    }

    /// Compares `cross_hessian` (when provided) against gradient differences.
    pub fn assert_cross_ok(model: &dyn Model, q: &[f64]) {
        let Some(cross) = model.cross_hessian(q) else { return };
        let r = model.random_idx();
        let f = model.fixed_idx();
        let mut dense = DMatrix::<f64>::zeros(r.len(), f.len());
        for (a, b, v) in cross {
            dense[(a, b)] += v;
        }
        let mut x = q.to_vec();
        let mut gp = vec![0.0; model.dim()];
        let mut gm = vec![0.0; model.dim()];
        for (b, &j) in f.iter().enumerate() {
            let h = 1e-5 * (1.0 + q[j].abs());
            x[j] = q[j] + h;
            model.log_density_grad(&x, &mut gp);
            x[j] = q[j] - h;
            model.log_density_grad(&x, &mut gm);
            x[j] = q[j];
            for (a, &i) in r.iter().enumerate() {
                let fd = -(gp[i] - gm[i]) / (2.0 * h);
                assert!(
                    (fd - dense[(a, b)]).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{}: cross[{a},{b}] analytic {} vs fd {fd}",
                    model.name(),
                    dense[(a, b)]
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn zoo() -> Vec<Arc<dyn Model>> {
        vec![
            build_model(&ModelConfig::new("bivariate_normal").with("rho", 0.5)).unwrap(),
            build_model(&ModelConfig::new("gaussian").with("dim", 6.0).with("scale_ratio", 10.0)).unwrap(),
            build_model(&ModelConfig::new("correlated_regression").with("x_offset", 20.0)).unwrap(),
            build_model(&ModelConfig::new("eight_schools_nc")).unwrap(),
            build_model(&ModelConfig::new("gmrf_poisson_lattice").with("side", 4.0).with_seed(3)).unwrap(),
            build_model(&ModelConfig::new("nb_glmm").with("groups", 5.0).with("per_group", 4.0).with_seed(2)).unwrap(),
            build_model(&ModelConfig::new("funnel").with("dim", 4.0)).unwrap(),
            build_model(&ModelConfig::new("linear_gaussian").with_seed(1)).unwrap(),
            build_model(&ModelConfig::new("linear_gaussian_rw").with_seed(1)).unwrap(),
            build_model(&ModelConfig::new("linear_gaussian_slope").with_seed(1)).unwrap(),
        ]
    }

    #[test]
    fn every_zoo_model_has_correct_gradients() {
        for m in zoo() {
            assert!(m.log_density(&m.initial_point()).is_finite(), "{}", m.name());
            let pts = random_points(m.as_ref(), 20, 0.5, 11);
            assert_gradient_ok(m.as_ref(), &pts);
        }
    }

    #[test]
    fn declared_hessians_match_differences() {
        for m in zoo() {
            if m.random_idx().is_empty() {
                assert!(m.hessian_uu(&m.initial_point()).is_none());
                continue;
            }
            let pts = random_points(m.as_ref(), 5, 0.5, 5);
            assert_hessian_uu_ok(m.as_ref(), &pts);
            for q in &pts {
                assert_cross_ok(m.as_ref(), q);
            }
            // Pattern is constant across points.
            let a = m.hessian_uu(&pts[0]).unwrap();
            let b = m.hessian_uu(&pts[1]).unwrap();
            assert_eq!(a.col_ptr(), b.col_ptr());
            assert_eq!(a.row_idx(), b.row_idx());
        }
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        for m in zoo() {
            let mut all: Vec<usize> = m.random_idx().iter().chain(m.fixed_idx()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..m.dim()).collect::<Vec<_>>(), "{}", m.name());
            assert_eq!(m.param_names().len(), m.dim());
        }
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        assert!(matches!(build_model(&ModelConfig::new("nope")), Err(ModelError::UnknownModel(_))));
        assert!(matches!(
            build_model(&ModelConfig::new("funnel").with("sides", 3.0)),
            Err(ModelError::InvalidParameter(_))
        ));
        assert!(matches!(
            build_model(&ModelConfig::new("funnel").with("dim", 2.5)),
            Err(ModelError::InvalidParameter(_))
        ));
    }

    /// Quadratic target: central differences have O(h²) error, so halving h
    /// quarters the discrepancy on a cubic perturbation.
    struct Cubic;
    impl Model for Cubic {
        fn name(&self) -> &str {
            "cubic"
        }
        fn dim(&self) -> usize {
            1
        }
        fn param_names(&self) -> Vec<String> {
            vec!["x".into()]
        }
        fn random_idx(&self) -> &[usize] {
            &[]
        }
        fn fixed_idx(&self) -> &[usize] {
            &[0]
        }
        fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = -q[0] + q[0] * q[0];
            -0.5 * q[0] * q[0] + q[0].powi(3) / 3.0
        }
        fn initial_point(&self) -> Vec<f64> {
            vec![0.0]
        }
    }

    #[test]
    fn central_difference_error_is_second_order() {
        let e1 = check_gradient(&Cubic, &[0.7], 1e-2).unwrap();
        let e2 = check_gradient(&Cubic, &[0.7], 5e-3).unwrap();
        assert!((e1 / e2 - 4.0).abs() < 0.05, "ratio {}", e1 / e2);
    }

    #[test]
    fn check_gradient_small_on_examples() {
        let m = BivariateNormal::new(1.0, 0.5).unwrap();
        for q in random_points(&m, 10, 2.0, 9) {
            assert!(check_gradient(&m, &q, 1e-5).unwrap() < 1e-6);
        }
        let m = EightSchoolsNc::new();
        assert!(check_gradient(&m, &m.initial_point(), 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ModelConfig::new("nb_glmm").with("groups", 10.0).with_seed(4);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
