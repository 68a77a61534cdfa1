use super::{Model, ModelError};

/// Neal's funnel: `v ~ N(0, 3²)`, `x_i | v ~ N(0, e^v)` for `i < dim`.
///
/// Every coordinate is a fixed effect, so the Laplace step looks for a joint
/// mode. That mode sits deep in the neck with curvature ratios beyond any
/// usable preconditioner.
#[derive(Debug, Clone)]
pub struct Funnel {
    fixed: Vec<usize>,
}

impl Funnel {
    pub fn new(dim: usize) -> Result<Self, ModelError> {
        if dim < 2 {
            return Err(ModelError::InvalidParameter(format!("dim must be at least 2, got {dim}")));
        }
        Ok(Self { fixed: (0..dim).collect() })
    }
}

impl Model for Funnel {
    fn name(&self) -> &str {
        "funnel"
    }

    fn dim(&self) -> usize {
        self.fixed.len()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["v".to_string()];
        names.extend((1..self.dim()).map(|i| format!("x[{i}]")));
        names
    }

    fn random_idx(&self) -> &[usize] {
        &[]
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let v = q[0];
        let k = (self.dim() - 1) as f64;
        let prec = (-v).exp();
        let mut ss = 0.0;
        for i in 1..self.dim() {
            ss += q[i] * q[i];
            grad[i] = -q[i] * prec;
        }
        grad[0] = -v / 9.0 - 0.5 * k + 0.5 * ss * prec;
        -v * v / 18.0 - 0.5 * k * v - 0.5 * ss * prec
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}
