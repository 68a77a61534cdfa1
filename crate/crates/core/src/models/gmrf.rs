use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{normal_prior, Dataset, DatasetSpec, Model, ModelError};
use crate::sparse::{amd_order, factorize, SparseSymMatrix};

const TRUE_INTERCEPT: f64 = 1.0;

/// Poisson counts on a `side × side` lattice with log link and a latent field
/// `u ~ N(0, (κ R)⁻¹)`, `R = D - W + τ I` (4-neighbour structure plus a nugget).
/// Fixed effects are the intercept and `log κ`.
#[derive(Debug, Clone)]
pub struct GmrfPoissonLattice {
    side: usize,
    /// `R` over the latent field.
    structure: SparseSymMatrix,
    y: Vec<f64>,
    random: Vec<usize>,
    fixed: [usize; 2],
    data: Dataset,
}

/// `D - W + τ I` for a 4-neighbour lattice, row-major site numbering.
pub(crate) fn lattice_structure(side: usize, tau: f64) -> SparseSymMatrix {
    let n = side * side;
    let mut trip = Vec::with_capacity(3 * n);
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            let deg = [r > 0, r + 1 < side, c > 0, c + 1 < side].iter().filter(|&&b| b).count();
            trip.push((i, i, deg as f64 + tau));
            if c + 1 < side {
                trip.push((i + 1, i, -1.0));
            }
            if r + 1 < side {
                trip.push((i + side, i, -1.0));
            }
        }
    }
    SparseSymMatrix::from_triplets(n, &trip).expect("lattice triplets are in range")
}

impl GmrfPoissonLattice {
    pub fn new(side: usize, kappa: f64, tau: f64, seed: u64) -> Result<Self, ModelError> {
        if side < 3 {
            return Err(ModelError::InvalidParameter(format!("side must be at least 3, got {side}")));
        }
        if !(kappa > 0.0) || !(tau > 0.0) {
            return Err(ModelError::InvalidParameter("kappa and tau must be positive".into()));
        }
        let n = side * side;
        let structure = lattice_structure(side, tau);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prec = structure.clone();
        prec.values_mut().iter_mut().for_each(|v| *v *= kappa);
        let factor = factorize(&prec, &amd_order(&prec)).expect("lattice precision is positive definite");
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u = factor.sample_from(&z).expect("dimensions match");

        let spec = DatasetSpec::new(seed)
            .size("side", side)
            .truth("kappa", kappa)
            .truth("tau", tau)
            .truth("intercept", TRUE_INTERCEPT);
        let mut data = Dataset::new(spec, &["row", "col", "y"]);
        let mut y = Vec::with_capacity(n);
        for (i, &ui) in u.iter().enumerate() {
            let count = Poisson::new((TRUE_INTERCEPT + ui).exp()).expect("positive rate").sample(&mut rng);
            y.push(count);
            data.push(vec![(i / side) as f64, (i % side) as f64, count]);
        }
        Ok(Self { side, structure, y, random: (0..n).collect(), fixed: [n, n + 1], data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn counts(&self) -> &[f64] {
        &self.y
    }
}

impl Model for GmrfPoissonLattice {
    fn name(&self) -> &str {
        "gmrf_poisson_lattice"
    }

    fn dim(&self) -> usize {
        self.random.len() + 2
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.random.len()).map(|i| format!("u[{}]", i + 1)).collect();
        names.push("intercept".into());
        names.push("log_kappa".into());
        names
    }

    fn random_idx(&self) -> &[usize] {
        &self.random
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.random.len();
        let (b0, lk) = (q[n], q[n + 1]);
        let kappa = lk.exp();
        let u = &q[..n];
        let ru = self.structure.mul_vec(u).expect("dimensions match");
        let mut f = 0.0;
        let mut quad = 0.0;
        let mut gb = 0.0;
        for i in 0..n {
            let eta = b0 + u[i];
            let mu = eta.exp();
            f += self.y[i] * eta - mu;
            grad[i] = self.y[i] - mu - kappa * ru[i];
            gb += self.y[i] - mu;
            quad += u[i] * ru[i];
        }
        f += 0.5 * n as f64 * lk - 0.5 * kappa * quad;
        grad[n] = gb;
        grad[n + 1] = 0.5 * n as f64 - 0.5 * kappa * quad;
        f += normal_prior(b0, 5.0, &mut grad[n]);
        f += normal_prior(lk, 2.0, &mut grad[n + 1]);
        f
    }

    fn hessian_uu(&self, q: &[f64]) -> Option<SparseSymMatrix> {
        let n = self.random.len();
        let kappa = q[n + 1].exp();
        let mut h = self.structure.clone();
        h.values_mut().iter_mut().for_each(|v| *v *= kappa);
        let col_ptr = h.col_ptr().to_vec();
        let vals = h.values_mut();
        for j in 0..n {
            // Diagonal is stored first in each column.
            vals[col_ptr[j]] += (q[n] + q[j]).exp();
        }
        Some(h)
    }

    fn cross_hessian(&self, q: &[f64]) -> Option<Vec<(usize, usize, f64)>> {
        let n = self.random.len();
        let kappa = q[n + 1].exp();
        let ru = self.structure.mul_vec(&q[..n]).expect("dimensions match");
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            out.push((i, 0, (q[n] + q[i]).exp()));
            out.push((i, 1, kappa * ru[i]));
        }
        Some(out)
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn dataset(&self) -> Option<&Dataset> {
        Some(&self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn side_three_pattern_counts() {
        let m = GmrfPoissonLattice::new(3, 1.0, 0.1, 1).unwrap();
        let h = m.hessian_uu(&m.initial_point()).unwrap();
        assert_eq!(h.nnz(), 21);
        let off = h.nnz() - h.dim();
        assert_eq!(off, 12);
    }

    #[test]
    fn large_lattice_is_very_sparse() {
        let m = GmrfPoissonLattice::new(32, 1.0, 0.1, 1).unwrap();
        assert!(m.hessian_uu(&m.initial_point()).unwrap().sparsity_percent() > 99.0);
    }

    #[test]
    fn score_at_zero_field() {
        let m = GmrfPoissonLattice::new(4, 1.0, 0.1, 7).unwrap();
        let q = m.initial_point();
        let mut g = vec![0.0; m.dim()];
        m.log_density_grad(&q, &mut g);
        // Prior term vanishes at u = 0, so the u-gradient is the Poisson score.
        for i in 0..16 {
            assert_eq!(g[i], m.counts()[i] - 1.0);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = GmrfPoissonLattice::new(5, 1.0, 0.1, 3).unwrap();
        let b = GmrfPoissonLattice::new(5, 1.0, 0.1, 3).unwrap();
        assert_eq!(a.dataset().unwrap().to_csv_string(), b.dataset().unwrap().to_csv_string());
        assert!(GmrfPoissonLattice::new(2, 1.0, 0.1, 3).is_err());
    }
}
