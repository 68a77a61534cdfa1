use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{normal_prior, Dataset, DatasetSpec, Model, ModelError};
use crate::sparse::{amd_order, factorize, SparseSymMatrix};

/// Random-effect structure of a [`LinearGaussian`] model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomStructure {
    /// One iid intercept per group.
    Intercepts,
    /// Group intercepts with a first-order random-walk-plus-nugget precision.
    RandomWalk,
    /// Independent intercept and slope (on the first covariate) per group.
    InterceptSlope,
}

const BETA_PRIOR_SD: f64 = 5.0;
const RW_NUGGET: f64 = 0.1;

/// Gaussian linear mixed model with known variances, `y = Xβ + Zu + ε`.
/// The posterior is Gaussian so the Laplace approximation is exact.
///
/// `q = (u, β)`.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    structure: RandomStructure,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<(usize, f64)>>,
    y: Vec<f64>,
    sigma: f64,
    lambda: SparseSymMatrix,
    random: Vec<usize>,
    fixed: Vec<usize>,
    data: Dataset,
}

impl LinearGaussian {
    pub fn new(
        structure: RandomStructure,
        groups: usize,
        per_group: usize,
        n_fixed: usize,
        sigma: f64,
        tau: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if groups < 2 || per_group < 1 || n_fixed < 1 {
            return Err(ModelError::InvalidParameter("need groups >= 2, per_group >= 1, n_fixed >= 1".into()));
        }
        if structure == RandomStructure::InterceptSlope && n_fixed < 2 {
            return Err(ModelError::InvalidParameter("random slopes need n_fixed >= 2".into()));
        }
        if !(sigma > 0.0) || !(tau > 0.0) {
            return Err(ModelError::InvalidParameter("sigma and tau must be positive".into()));
        }
        let nu = match structure {
            RandomStructure::InterceptSlope => 2 * groups,
            _ => groups,
        };
        let inv_t2 = 1.0 / (tau * tau);
        let lambda = match structure {
            RandomStructure::RandomWalk => {
                let mut trip = Vec::new();
                for g in 0..groups {
                    let deg = (g > 0) as usize + (g + 1 < groups) as usize;
                    trip.push((g, g, (deg as f64 + RW_NUGGET) * inv_t2));
                    if g + 1 < groups {
                        trip.push((g + 1, g, -inv_t2));
                    }
                }
                SparseSymMatrix::from_triplets(groups, &trip).expect("chain triplets are in range")
            }
            _ => SparseSymMatrix::diagonal(&vec![inv_t2; nu]),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factor = factorize(&lambda, &amd_order(&lambda)).expect("prior precision is positive definite");
        let z0: Vec<f64> = (0..nu).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u_true = factor.sample_from(&z0).expect("dimensions match");
        let beta_true: Vec<f64> = (0..n_fixed).map(|k| if k % 2 == 0 { 1.0 } else { -0.5 } / (k + 1) as f64).collect();

        let mut spec = DatasetSpec::new(seed)
            .size("groups", groups)
            .size("per_group", per_group)
            .size("n_fixed", n_fixed)
            .truth("sigma", sigma)
            .truth("tau", tau);
        for (k, b) in beta_true.iter().enumerate() {
            spec = spec.truth(&format!("beta{k}"), *b);
        }
        let mut cols: Vec<String> = vec!["group".into()];
        cols.extend((1..n_fixed).map(|k| format!("x{k}")));
        cols.push("y".into());
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut data = Dataset::new(spec, &col_refs);

        let (mut x, mut z, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for g in 0..groups {
            for _ in 0..per_group {
                let mut row = vec![1.0];
                for _ in 1..n_fixed {
                    row.push(StandardNormal.sample(&mut rng));
                }
                let zrow = match structure {
                    RandomStructure::InterceptSlope => vec![(2 * g, 1.0), (2 * g + 1, row[1])],
                    _ => vec![(g, 1.0)],
                };
                let e: f64 = StandardNormal.sample(&mut rng);
                let mean: f64 = row.iter().zip(&beta_true).map(|(a, b)| a * b).sum::<f64>()
                    + zrow.iter().map(|&(j, c)| c * u_true[j]).sum::<f64>();
                let yi = mean + sigma * e;
                let mut rec = vec![g as f64];
                rec.extend_from_slice(&row[1..]);
                rec.push(yi);
                data.push(rec);
                x.push(row);
                z.push(zrow);
                y.push(yi);
            }
        }
        Ok(Self {
            structure,
            x,
            z,
            y,
            sigma,
            lambda,
            random: (0..nu).collect(),
            fixed: (nu..nu + n_fixed).collect(),
            data,
        })
    }

    pub fn structure(&self) -> RandomStructure {
        self.structure
    }

    /// Fixed-effect design rows.
    pub fn design_fixed(&self) -> &[Vec<f64>] {
        &self.x
    }

    /// Random-effect design rows as `(column, coefficient)` pairs.
    pub fn design_random(&self) -> &[Vec<(usize, f64)>] {
        &self.z
    }

    pub fn response(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Prior precision of the random effects.
    pub fn prior_precision(&self) -> &SparseSymMatrix {
        &self.lambda
    }

    pub fn beta_prior_sd(&self) -> f64 {
        BETA_PRIOR_SD
    }

    fn residuals(&self, q: &[f64]) -> Vec<f64> {
        let nu = self.random.len();
        self.y
            .iter()
            .zip(self.x.iter().zip(&self.z))
            .map(|(yi, (xr, zr))| {
                let fx: f64 = xr.iter().zip(&q[nu..]).map(|(a, b)| a * b).sum();
                let rz: f64 = zr.iter().map(|&(j, c)| c * q[j]).sum();
                yi - fx - rz
            })
            .collect()
    }
}

impl Model for LinearGaussian {
    fn name(&self) -> &str {
        match self.structure {
            RandomStructure::Intercepts => "linear_gaussian",
            RandomStructure::RandomWalk => "linear_gaussian_rw",
            RandomStructure::InterceptSlope => "linear_gaussian_slope",
        }
    }

    fn dim(&self) -> usize {
        self.random.len() + self.fixed.len()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.random.len()).map(|i| format!("u[{i}]")).collect();
        names.extend((0..self.fixed.len()).map(|k| format!("beta[{k}]")));
        names
    }

    fn random_idx(&self) -> &[usize] {
        &self.random
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let nu = self.random.len();
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let r = self.residuals(q);
        let lu = self.lambda.mul_vec(&q[..nu]).expect("dimensions match");
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut f = 0.0;
        for (k, rk) in r.iter().enumerate() {
            f -= 0.5 * rk * rk * inv_s2;
            for &(j, c) in &self.z[k] {
                grad[j] += c * rk * inv_s2;
            }
            for (b, xv) in self.x[k].iter().enumerate() {
                grad[nu + b] += xv * rk * inv_s2;
            }
        }
        for j in 0..nu {
            f -= 0.5 * q[j] * lu[j];
            grad[j] -= lu[j];
        }
        for b in 0..self.fixed.len() {
            f += normal_prior(q[nu + b], BETA_PRIOR_SD, &mut grad[nu + b]);
        }
        f
    }

    fn hessian_uu(&self, _q: &[f64]) -> Option<SparseSymMatrix> {
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let nu = self.random.len();
        let mut trip = Vec::new();
        for j in 0..nu {
            for (i, v) in self.lambda.column(j) {
                trip.push((i, j, v));
            }
        }
        for zr in &self.z {
            for &(a, ca) in zr {
                for &(b, cb) in zr {
                    if a >= b {
                        trip.push((a, b, ca * cb * inv_s2));
                    }
                }
            }
        }
        Some(SparseSymMatrix::from_triplets(nu, &trip).expect("indices are in range"))
    }

    fn cross_hessian(&self, _q: &[f64]) -> Option<Vec<(usize, usize, f64)>> {
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let mut out = Vec::new();
        for (zr, xr) in self.z.iter().zip(&self.x) {
            for &(a, ca) in zr {
                for (b, xv) in xr.iter().enumerate() {
                    out.push((a, b, ca * xv * inv_s2));
                }
            }
        }
        Some(out)
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn dataset(&self) -> Option<&Dataset> {
        Some(&self.data)
    }

    fn exact_moments(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let nu = self.random.len();
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let mut prec = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for k in 0..self.y.len() {
            let mut row = vec![0.0; n];
            for &(j, c) in &self.z[k] {
                row[j] += c;
            }
            for (b, xv) in self.x[k].iter().enumerate() {
                row[nu + b] = *xv;
            }
            for i in 0..n {
                rhs[i] += row[i] * self.y[k] * inv_s2;
                for j in 0..n {
                    prec[(i, j)] += row[i] * row[j] * inv_s2;
                }
            }
        }
        let mut block = prec.view_mut((0, 0), (nu, nu));
        block += self.lambda.to_dense();
        for b in nu..n {
            prec[(b, b)] += 1.0 / (BETA_PRIOR_SD * BETA_PRIOR_SD);
        }
        let cov = prec.clone().cholesky()?.inverse();
        let mean = &cov * rhs;
        Some((mean.as_slice().to_vec(), cov))
    }
}
