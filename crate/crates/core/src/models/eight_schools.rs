use super::{Dataset, DatasetSpec, Model};

pub(crate) const Y: [f64; 8] = [28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0];
pub(crate) const SIGMA: [f64; 8] = [15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0];

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Non-centered eight schools: `q = (η_1..η_8, μ, log τ)`, flat priors on
/// `μ` and `log τ`, with the `log τ` Jacobian term.
#[derive(Debug, Clone)]
pub struct EightSchoolsNc {
    random: [usize; 8],
    fixed: [usize; 2],
    data: Dataset,
}

impl Default for EightSchoolsNc {
    fn default() -> Self {
        Self::new()
    }
}

impl EightSchoolsNc {
    pub fn new() -> Self {
        let mut data = Dataset::new(DatasetSpec::new(0).size("schools", 8), &["y", "sigma"]);
        for i in 0..8 {
            data.push(vec![Y[i], SIGMA[i]]);
        }
        Self { random: [0, 1, 2, 3, 4, 5, 6, 7], fixed: [8, 9], data }
    }
}

impl Model for EightSchoolsNc {
    fn name(&self) -> &str {
        "eight_schools_nc"
    }

    fn dim(&self) -> usize {
        10
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=8).map(|i| format!("eta[{i}]")).collect();
        names.push("mu".into());
        names.push("logtau".into());
        names
    }

    fn random_idx(&self) -> &[usize] {
        &self.random
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let (mu, lt) = (q[8], q[9]);
        let tau = lt.exp();
        let mut f = lt;
        grad[8] = 0.0;
        grad[9] = 1.0;
        for i in 0..8 {
            let eta = q[i];
            let s2 = SIGMA[i] * SIGMA[i];
            let resid = Y[i] - mu - tau * eta;
            let r = resid / s2;
            f += -0.5 * eta * eta - 0.5 * resid * r - SIGMA[i].ln() - LN_SQRT_2PI;
            grad[i] = -eta + tau * r;
            grad[8] += r;
            grad[9] += r * tau * eta;
        }
        f
    }

    fn hessian_uu(&self, q: &[f64]) -> Option<crate::sparse::SparseSymMatrix> {
        let tau2 = (2.0 * q[9]).exp();
        let d: Vec<f64> = SIGMA.iter().map(|s| 1.0 + tau2 / (s * s)).collect();
        Some(crate::sparse::SparseSymMatrix::diagonal(&d))
    }

    fn cross_hessian(&self, q: &[f64]) -> Option<Vec<(usize, usize, f64)>> {
        let (mu, lt) = (q[8], q[9]);
        let tau = lt.exp();
        let mut out = Vec::with_capacity(16);
        for i in 0..8 {
            let s2 = SIGMA[i] * SIGMA[i];
            let r = (Y[i] - mu - tau * q[i]) / s2;
            out.push((i, 0, tau / s2));
            out.push((i, 1, -tau * r + tau * tau * q[i] / s2));
        }
        Some(out)
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut q = vec![1.0; 10];
        q[8] = 0.0;
        q[9] = 1.0;
        q
    }

    fn dataset(&self) -> Option<&Dataset> {
        Some(&self.data)
    }
}
