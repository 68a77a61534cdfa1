use nalgebra::DMatrix;

use super::{Model, ModelError};

/// Zero-mean Gaussian with AR(1) correlation `ρ^|i-j|` and marginal sds that
/// grow geometrically from 1 to `scale_ratio`.
#[derive(Debug, Clone)]
pub struct Ar1Gaussian {
    rho: f64,
    scales: Vec<f64>,
    fixed: Vec<usize>,
}

impl Ar1Gaussian {
    pub fn new(dim: usize, rho: f64, scale_ratio: f64) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidParameter("dim must be at least 1".into()));
        }
        if !(rho.abs() < 1.0) {
            return Err(ModelError::InvalidParameter(format!("|rho| must be below 1, got {rho}")));
        }
        if !(scale_ratio > 0.0) {
            return Err(ModelError::InvalidParameter(format!("scale_ratio must be positive, got {scale_ratio}")));
        }
        let scales = (0..dim)
            .map(|i| if dim == 1 { 1.0 } else { scale_ratio.powf(i as f64 / (dim - 1) as f64) })
            .collect();
        Ok(Self { rho, scales, fixed: (0..dim).collect() })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.scales.len();
        DMatrix::from_fn(n, n, |i, j| self.scales[i] * self.scales[j] * self.rho.powi((i as i32 - j as i32).abs()))
    }
}

impl Model for Ar1Gaussian {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        self.scales.len()
    }

    fn param_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x{i}")).collect()
    }

    fn random_idx(&self) -> &[usize] {
        &[]
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        // The AR(1) correlation inverse is tridiagonal:
        // (1/(1-ρ²)) * [1, 1+ρ², ..., 1+ρ², 1] on the diagonal, -ρ off it.
        let n = self.dim();
        let r = self.rho;
        let c = 1.0 / (1.0 - r * r);
        let z: Vec<f64> = q.iter().zip(&self.scales).map(|(x, s)| x / s).collect();
        let mut f = 0.0;
        for i in 0..n {
            let d = if n == 1 { 1.0 - r * r } else if i == 0 || i == n - 1 { 1.0 } else { 1.0 + r * r };
            let mut kz = d * z[i];
            if i > 0 {
                kz -= r * z[i - 1];
            }
            if i + 1 < n {
                kz -= r * z[i + 1];
            }
            kz *= c;
            f -= 0.5 * z[i] * kz;
            grad[i] = -kz / self.scales[i];
        }
        f
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn exact_moments(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        Some((vec![0.0; self.dim()], self.covariance()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_is_minus_precision_times_q() {
        let m = Ar1Gaussian::new(5, 0.7, 20.0).unwrap();
        let prec = m.covariance().try_inverse().unwrap();
        let q = [0.3, -1.0, 2.0, 0.5, -4.0];
        let mut g = [0.0; 5];
        let f = m.log_density_grad(&q, &mut g);
        let qv = nalgebra::DVector::from_row_slice(&q);
        let pg = &prec * &qv;
        for i in 0..5 {
            assert!((g[i] + pg[i]).abs() < 1e-10);
        }
        assert!((f + 0.5 * qv.dot(&pg)).abs() < 1e-10);
    }

    #[test]
    fn one_dimensional_is_standard_normal() {
        let m = Ar1Gaussian::new(1, 0.5, 3.0).unwrap();
        let mut g = [0.0];
        assert!((m.log_density_grad(&[2.0], &mut g) + 2.0).abs() < 1e-14);
        assert!((g[0] + 2.0).abs() < 1e-14);
    }
}
