use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use statrs::function::gamma::{digamma, ln_gamma};

use super::{normal_prior, Dataset, DatasetSpec, Model, ModelError};
use crate::sparse::SparseSymMatrix;

const TREATMENTS: usize = 4;
const TRUE_BETA: [f64; TREATMENTS] = [1.0, 0.5, -0.5, 0.3];
const TRUE_PHI: f64 = 2.0;
const TRUE_SIGMA: f64 = 0.8;

/// Negative binomial (NB2) regression with group random intercepts
/// `u_g ~ N(0, σ²)`, a treatment factor with four levels, and dispersion `φ`.
///
/// `q = (u_1..u_G, β_0..β_3, log φ, log σ)`.
#[derive(Debug, Clone)]
pub struct NbGlmm {
    groups: usize,
    group: Vec<usize>,
    level: Vec<usize>,
    y: Vec<f64>,
    random: Vec<usize>,
    fixed: Vec<usize>,
    data: Dataset,
}

impl NbGlmm {
    pub fn new(groups: usize, per_group: usize, seed: u64) -> Result<Self, ModelError> {
        if groups < 2 || per_group < 1 {
            return Err(ModelError::InvalidParameter(format!(
                "need at least 2 groups and 1 observation per group, got {groups} and {per_group}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = Normal::new(0.0, TRUE_SIGMA).expect("valid sd");
        let u: Vec<f64> = (0..groups).map(|_| re.sample(&mut rng)).collect();
        let spec = DatasetSpec::new(seed)
            .size("groups", groups)
            .size("per_group", per_group)
            .truth("beta0", TRUE_BETA[0])
            .truth("beta1", TRUE_BETA[1])
            .truth("beta2", TRUE_BETA[2])
            .truth("beta3", TRUE_BETA[3])
            .truth("phi", TRUE_PHI)
            .truth("sigma", TRUE_SIGMA);
        let mut data = Dataset::new(spec, &["group", "treatment", "y"]);
        let (mut group, mut level, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (g, &ug) in u.iter().enumerate() {
            for j in 0..per_group {
                let l = (g + j) % TREATMENTS;
                let eta = TRUE_BETA[0] + if l > 0 { TRUE_BETA[l] } else { 0.0 } + ug;
                // Gamma-Poisson mixture with mean μ and variance μ + μ²/φ.
                let rate = Gamma::new(TRUE_PHI, eta.exp() / TRUE_PHI).expect("valid gamma").sample(&mut rng);
                let count = if rate > 0.0 { Poisson::new(rate).expect("positive rate").sample(&mut rng) } else { 0.0 };
                group.push(g);
                level.push(l);
                y.push(count);
                data.push(vec![g as f64, l as f64, count]);
            }
        }
        let nf = TREATMENTS + 2;
        Ok(Self {
            groups,
            group,
            level,
            y,
            random: (0..groups).collect(),
            fixed: (groups..groups + nf).collect(),
            data,
        })
    }

    fn eta(&self, q: &[f64], k: usize) -> f64 {
        let g = self.groups;
        let l = self.level[k];
        q[g] + if l > 0 { q[g + l] } else { 0.0 } + q[self.group[k]]
    }
}

impl Model for NbGlmm {
    fn name(&self) -> &str {
        "nb_glmm"
    }

    fn dim(&self) -> usize {
        self.groups + TREATMENTS + 2
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.groups).map(|i| format!("u[{i}]")).collect();
        names.extend((0..TREATMENTS).map(|k| format!("beta[{k}]")));
        names.push("log_phi".into());
        names.push("log_sigma".into());
        names
    }

    fn random_idx(&self) -> &[usize] {
        &self.random
    }

    fn fixed_idx(&self) -> &[usize] {
        &self.fixed
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let g = self.groups;
        let (ilp, ils) = (g + TREATMENTS, g + TREATMENTS + 1);
        let phi = q[ilp].exp();
        let ls = q[ils];
        let inv_var = (-2.0 * ls).exp();
        grad.iter_mut().for_each(|v| *v = 0.0);
        let ln_phi = phi.ln();
        let (lg_phi, dg_phi) = (ln_gamma(phi), digamma(phi));
        let mut f = 0.0;
        let mut g_phi = 0.0;
        for k in 0..self.y.len() {
            let y = self.y[k];
            let eta = self.eta(q, k);
            let mu = eta.exp();
            let ln_pm = (phi + mu).ln();
            f += ln_gamma(y + phi) - lg_phi + phi * (ln_phi - ln_pm) + y * (eta - ln_pm);
            let d_eta = phi * (y - mu) / (phi + mu);
            grad[self.group[k]] += d_eta;
            grad[g] += d_eta;
            if self.level[k] > 0 {
                grad[g + self.level[k]] += d_eta;
            }
            g_phi += digamma(y + phi) - dg_phi + ln_phi + 1.0 - ln_pm - (phi + y) / (phi + mu);
        }
        grad[ilp] = phi * g_phi;
        let mut ss = 0.0;
        for i in 0..g {
            ss += q[i] * q[i];
            grad[i] -= q[i] * inv_var;
        }
        f += -(g as f64) * ls - 0.5 * ss * inv_var;
        grad[ils] = -(g as f64) + ss * inv_var;
        for k in 0..TREATMENTS {
            f += normal_prior(q[g + k], 5.0, &mut grad[g + k]);
        }
        f += normal_prior(q[ilp], 2.0, &mut grad[ilp]);
        f += normal_prior(ls, 2.0, &mut grad[ils]);
        f
    }

    fn hessian_uu(&self, q: &[f64]) -> Option<SparseSymMatrix> {
        let g = self.groups;
        let phi = q[g + TREATMENTS].exp();
        let inv_var = (-2.0 * q[g + TREATMENTS + 1]).exp();
        let mut d = vec![inv_var; g];
        for k in 0..self.y.len() {
            let mu = self.eta(q, k).exp();
            d[self.group[k]] += phi * mu * (phi + self.y[k]) / ((phi + mu) * (phi + mu));
        }
        Some(SparseSymMatrix::diagonal(&d))
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn dataset(&self) -> Option<&Dataset> {
        Some(&self.data)
    }
}
