use nalgebra::DMatrix;

use super::{Model, ModelError};

/// Zero-mean bivariate normal with `Σ = [[1, ρ√τ], [ρ√τ, τ]]`.
#[derive(Debug, Clone)]
pub struct BivariateNormal {
    tau: f64,
    rho: f64,
    // Precision entries.
    p11: f64,
    p12: f64,
    p22: f64,
}

impl BivariateNormal {
    pub fn new(tau: f64, rho: f64) -> Result<Self, ModelError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(ModelError::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        if !(rho.abs() < 1.0) {
            return Err(ModelError::InvalidParameter(format!("|rho| must be below 1, got {rho}")));
        }
        let c = rho * tau.sqrt();
        let det = tau - c * c;
        Ok(Self { tau, rho, p11: tau / det, p12: -c / det, p22: 1.0 / det })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let c = self.rho * self.tau.sqrt();
        DMatrix::from_row_slice(2, 2, &[1.0, c, c, self.tau])
    }
}

impl Model for BivariateNormal {
    fn name(&self) -> &str {
        "bivariate_normal"
    }

    fn dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["x1".into(), "x2".into()]
    }

    fn random_idx(&self) -> &[usize] {
        &[]
    }

    fn fixed_idx(&self) -> &[usize] {
        &[0, 1]
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let g0 = self.p11 * q[0] + self.p12 * q[1];
        let g1 = self.p12 * q[0] + self.p22 * q[1];
        grad[0] = -g0;
        grad[1] = -g1;
        -0.5 * (q[0] * g0 + q[1] * g1)
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn exact_moments(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        Some((vec![0.0, 0.0], self.covariance()))
    }
}
