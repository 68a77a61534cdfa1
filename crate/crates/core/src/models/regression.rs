use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{normal_prior, Dataset, DatasetSpec, Model, ModelError};

const TRUE_INTERCEPT: f64 = 1.0;
const TRUE_SLOPE: f64 = 0.02;
const TRUE_SIGMA: f64 = 0.5;

/// Linear regression on an evenly spaced covariate centered at `x_offset`.
/// Far from zero the intercept and slope become almost collinear.
#[derive(Debug, Clone)]
pub struct CorrelatedRegression {
    x: Vec<f64>,
    y: Vec<f64>,
    data: Dataset,
}

impl CorrelatedRegression {
    pub fn new(n: usize, x_offset: f64, seed: u64) -> Result<Self, ModelError> {
        if n < 3 {
            return Err(ModelError::InvalidParameter(format!("n must be at least 3, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = (n - 1) as f64 / 2.0;
        let x: Vec<f64> = (0..n).map(|i| x_offset + (i as f64 - centre)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let e: f64 = StandardNormal.sample(&mut rng);
                TRUE_INTERCEPT + TRUE_SLOPE * xi + TRUE_SIGMA * e
            })
            .collect();
        let spec = DatasetSpec::new(seed)
            .size("n", n)
            .truth("x_offset", x_offset)
            .truth("intercept", TRUE_INTERCEPT)
            .truth("slope", TRUE_SLOPE)
            .truth("sigma", TRUE_SIGMA);
        let mut data = Dataset::new(spec, &["x", "y"]);
        for (&a, &b) in x.iter().zip(&y) {
            data.push(vec![a, b]);
        }
        Ok(Self { x, y, data })
    }

    pub fn covariate(&self) -> &[f64] {
        &self.x
    }
}

impl Model for CorrelatedRegression {
    fn name(&self) -> &str {
        "correlated_regression"
    }

    fn dim(&self) -> usize {
        3
    }

    fn param_names(&self) -> Vec<String> {
        vec!["intercept".into(), "slope".into(), "log_sigma".into()]
    }

    fn random_idx(&self) -> &[usize] {
        &[]
    }

    fn fixed_idx(&self) -> &[usize] {
        &[0, 1, 2]
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let (a, b, ls) = (q[0], q[1], q[2]);
        let inv_var = (-2.0 * ls).exp();
        let (mut ga, mut gb, mut ss) = (0.0, 0.0, 0.0);
        for (&xi, &yi) in self.x.iter().zip(&self.y) {
            let r = yi - a - b * xi;
            ga += r;
            gb += r * xi;
            ss += r * r;
        }
        let n = self.x.len() as f64;
        let mut f = -n * ls - 0.5 * ss * inv_var;
        grad[0] = ga * inv_var;
        grad[1] = gb * inv_var;
        grad[2] = -n + ss * inv_var;
        f += normal_prior(a, 5.0, &mut grad[0]);
        f += normal_prior(b, 5.0, &mut grad[1]);
        f += normal_prior(ls, 2.0, &mut grad[2]);
        f
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; 3]
    }

    fn dataset(&self) -> Option<&Dataset> {
        Some(&self.data)
    }
}
