//! Simplicial up-looking Cholesky with a separate symbolic phase.

use nalgebra::DMatrix;

use super::{LinalgError, Permutation, Result, SparseSymMatrix, DEFAULT_DENSE_CAP, JITTER_LADDER};

const NONE: usize = usize::MAX;

/// Symbolic analysis of `P A Pᵀ`: elimination tree, column counts of `L`, and
/// the scatter map from `A`'s storage into the permuted upper triangle.
///
/// Reusable for any matrix with the same pattern as the analyzed one.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    dim: usize,
    nnz_a: usize,
    perm: Permutation,
    parent: Vec<usize>,
    /// Upper-triangular CSC pattern of `P A Pᵀ` (column k = row k of the lower triangle).
    c_col_ptr: Vec<usize>,
    c_row_idx: Vec<usize>,
    /// `a_to_c[p]` = slot in the upper pattern receiving `A.values[p]`.
    a_to_c: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyze(a: &SparseSymMatrix, perm: &Permutation) -> Result<Self> {
        let n = a.dim();
        if perm.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: perm.len() });
        }
        let inv = perm.inverse();

        // Count entries per column of the permuted upper triangle.
        let mut counts = vec![0usize; n];
        for j in 0..n {
            for (i, _) in a.column(j) {
                let (pi, pj) = (inv[i], inv[j]);
                counts[pi.max(pj)] += 1;
            }
        }
        let mut c_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            c_col_ptr[k + 1] = c_col_ptr[k] + counts[k];
        }
        let mut next = c_col_ptr[..n].to_vec();
        let mut c_row_idx = vec![0usize; a.nnz()];
        let mut a_to_c = vec![0usize; a.nnz()];
        for j in 0..n {
            for p in a.col_ptr()[j]..a.col_ptr()[j + 1] {
                let i = a.row_idx()[p];
                let (pi, pj) = (inv[i], inv[j]);
                let (row, col) = (pi.min(pj), pi.max(pj));
                let slot = next[col];
                next[col] += 1;
                c_row_idx[slot] = row;
                a_to_c[p] = slot;
            }
        }
        // Sort rows within each column, carrying the scatter map along.
        let mut slot_of: Vec<usize> = vec![0; a.nnz()];
        for (p, &s) in a_to_c.iter().enumerate() {
            slot_of[s] = p;
        }
        for k in 0..n {
            let range = c_col_ptr[k]..c_col_ptr[k + 1];
            let mut pairs: Vec<(usize, usize)> =
                range.clone().map(|s| (c_row_idx[s], slot_of[s])).collect();
            pairs.sort_unstable();
            for (off, (row, p)) in pairs.into_iter().enumerate() {
                c_row_idx[range.start + off] = row;
                a_to_c[p] = range.start + off;
            }
        }

        let parent = etree(n, &c_col_ptr, &c_row_idx);

        // Column counts of L from the row patterns.
        let mut col_counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![NONE; n];
        for k in 0..n {
            let top = ereach(&c_col_ptr, &c_row_idx, k, &parent, &mut stack, &mut flag);
            for &i in &stack[top..] {
                col_counts[i] += 1;
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + col_counts[k];
        }

        Ok(Self {
            dim: n,
            nnz_a: a.nnz(),
            perm: perm.clone(),
            parent,
            c_col_ptr,
            c_row_idx,
            a_to_c,
            l_col_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Structural nonzeros of `L`, diagonal included.
    pub fn nnz_l(&self) -> usize {
        self.l_col_ptr[self.dim]
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    pub fn etree(&self) -> &[usize] {
        &self.parent
    }

    /// Numeric factorization of a matrix sharing the analyzed pattern.
    pub fn factorize(&self, a: &SparseSymMatrix) -> Result<CholeskyFactor> {
        if a.dim() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: a.dim() });
        }
        if a.nnz() != self.nnz_a {
            return Err(LinalgError::InvalidStructure(
                "matrix pattern differs from the analyzed pattern".into(),
            ));
        }
        let n = self.dim;
        let mut c_values = vec![0.0; self.nnz_a];
        for (p, &v) in a.values().iter().enumerate() {
            c_values[self.a_to_c[p]] = v;
        }

        let nnz_l = self.nnz_l();
        let mut l_row_idx = vec![0usize; nnz_l];
        let mut l_values = vec![0.0; nnz_l];
        let mut next = self.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![NONE; n];

        for k in 0..n {
            let top = ereach(&self.c_col_ptr, &self.c_row_idx, k, &self.parent, &mut stack, &mut flag);
            for p in self.c_col_ptr[k]..self.c_col_ptr[k + 1] {
                x[self.c_row_idx[p]] = c_values[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / l_values[self.l_col_ptr[i]];
                x[i] = 0.0;
                for p in self.l_col_ptr[i] + 1..next[i] {
                    x[l_row_idx[p]] -= l_values[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                l_row_idx[p] = k;
                l_values[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { column: k, pivot: d });
            }
            let p = next[k];
            next[k] += 1;
            l_row_idx[p] = k;
            l_values[p] = d.sqrt();
        }

        Ok(CholeskyFactor {
            dim: n,
            perm: self.perm.clone(),
            col_ptr: self.l_col_ptr.clone(),
            row_idx: l_row_idx,
            values: l_values,
        })
    }
}

/// Elimination tree of the upper-triangular pattern (Liu's algorithm).
fn etree(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L`, written to `stack[top..n]` in
/// topological order. `flag` is a marker array reused across calls.
fn ereach(
    col_ptr: &[usize],
    row_idx: &[usize],
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    flag: &mut [usize],
) -> usize {
    let n = stack.len();
    let mut top = n;
    flag[k] = k;
    for &row in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while flag[i] != k {
            stack[len] = i;
            len += 1;
            flag[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Sparse lower-triangular factor `L` with `P A Pᵀ = L Lᵀ`.
///
/// Columns store the diagonal first. Solves and products act on vectors in
/// the permuted ordering; [`Permutation::apply`] maps into it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    perm: Permutation,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    /// Structural nonzeros of `L` (numeric zeros included).
    pub fn fill_count(&self) -> usize {
        self.values.len()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|j| self.values[self.col_ptr[j]]).collect()
    }

    /// `log det(A) = 2 Σ log L_jj`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: len });
        }
        Ok(())
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check(x.len())?;
        for j in 0..self.dim {
            let start = self.col_ptr[j];
            let xj = x[j] / self.values[start];
            x[j] = xj;
            if xj != 0.0 {
                let end = self.col_ptr[j + 1];
                for (&i, &v) in self.row_idx[start + 1..end].iter().zip(&self.values[start + 1..end]) {
                    x[i] -= v * xj;
                }
            }
        }
        Ok(())
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.check(x.len())?;
        for j in (0..self.dim).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            // Four partial sums break the serial add chain.
            let rows = &self.row_idx[start + 1..end];
            let vals = &self.values[start + 1..end];
            let mut acc = [0.0; 4];
            let mut rc = rows.chunks_exact(4);
            let mut vc = vals.chunks_exact(4);
            for (r, v) in (&mut rc).zip(&mut vc) {
                acc[0] += v[0] * x[r[0]];
                acc[1] += v[1] * x[r[1]];
                acc[2] += v[2] * x[r[2]];
                acc[3] += v[3] * x[r[3]];
            }
            for (&i, &v) in rc.remainder().iter().zip(vc.remainder()) {
                acc[0] += v * x[i];
            }
            let s = x[j] - ((acc[0] + acc[1]) + (acc[2] + acc[3]));
            x[j] = s / self.values[start];
        }
        Ok(())
    }

    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x)?;
        Ok(x)
    }

    pub fn solve_upper(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_upper_in_place(&mut x)?;
        Ok(x)
    }

    /// `y = L x`.
    pub fn mul_lower(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        self.check(x.len())?;
        self.check(y.len())?;
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.dim {
            let xj = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
        Ok(())
    }

    /// `y = Lᵀ x`.
    pub fn mul_upper(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        self.check(x.len())?;
        self.check(y.len())?;
        for j in 0..self.dim {
            let mut s = 0.0;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                s += self.values[p] * x[self.row_idx[p]];
            }
            y[j] = s;
        }
        Ok(())
    }

    /// Solves `A x = b` in the original ordering.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        let mut z = vec![0.0; self.dim];
        self.perm.apply(b, &mut z);
        self.solve_lower_in_place(&mut z)?;
        self.solve_upper_in_place(&mut z)?;
        let mut x = vec![0.0; self.dim];
        self.perm.apply_transpose(&z, &mut x);
        Ok(x)
    }

    /// `x = Pᵀ L⁻ᵀ z`. For standard normal `z`, `x ~ N(0, A⁻¹)`.
    pub fn sample_from(&self, z: &[f64]) -> Result<Vec<f64>> {
        let y = self.solve_upper(z)?;
        let mut x = vec![0.0; self.dim];
        self.perm.apply_transpose(&y, &mut x);
        Ok(x)
    }

    pub fn l_dense(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.dim, self.dim);
        for j in 0..self.dim {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                l[(self.row_idx[p], j)] = self.values[p];
            }
        }
        l
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Cholesky factorization of `P A Pᵀ`.
pub fn factorize(a: &SparseSymMatrix, perm: &Permutation) -> Result<CholeskyFactor> {
    SymbolicCholesky::analyze(a, perm)?.factorize(a)
}

/// Factorizes `A`, retrying with `A + τ I` for `τ ∈ {1e-8, 1e-6, 1e-4} · max|diag|`
/// when a pivot fails. Returns the factor and the jitter used (0 when none).
pub fn factorize_with_jitter(
    symbolic: &SymbolicCholesky,
    a: &SparseSymMatrix,
) -> Result<(CholeskyFactor, f64)> {
    match symbolic.factorize(a) {
        Ok(f) => Ok((f, 0.0)),
        Err(LinalgError::NotPositiveDefinite { column, pivot }) => {
            let scale = a.max_abs_diag().max(f64::MIN_POSITIVE);
            let mut last = LinalgError::NotPositiveDefinite { column, pivot };
            for mult in JITTER_LADDER {
                let tau = mult * scale;
                match symbolic.factorize(&a.add_diagonal(tau)) {
                    Ok(f) => return Ok((f, tau)),
                    Err(e @ LinalgError::NotPositiveDefinite { .. }) => last = e,
                    Err(e) => return Err(e),
                }
            }
            Err(last)
        }
        Err(e) => Err(e),
    }
}

/// `Σ = Q⁻¹` as a dense matrix, one column solve at a time.
pub fn precision_to_cov(q: &SparseSymMatrix, cap: Option<usize>) -> Result<DMatrix<f64>> {
    let cap = cap.unwrap_or(DEFAULT_DENSE_CAP);
    if q.dim() > cap {
        return Err(LinalgError::DimensionTooLarge { dim: q.dim(), cap });
    }
    let perm = super::amd_order(q);
    let factor = factorize(q, &perm)?;
    Ok(factor_inverse(&factor))
}

/// Dense inverse of the matrix represented by a factor.
pub(crate) fn factor_inverse(factor: &CholeskyFactor) -> DMatrix<f64> {
    let n = factor.dim();
    let inv = factor.perm().inverse();
    let fwd = factor.perm().forward();
    let mut sigma = DMatrix::zeros(n, n);
    let mut z = vec![0.0; n];
    for j in 0..n {
        z.iter_mut().for_each(|v| *v = 0.0);
        z[inv[j]] = 1.0;
        factor.solve_lower_in_place(&mut z).expect("dimension checked");
        factor.solve_upper_in_place(&mut z).expect("dimension checked");
        for (i, &zi) in z.iter().enumerate() {
            sigma[(fwd[i], j)] = zi;
        }
    }
    let sym = (&sigma + sigma.transpose()) * 0.5;
    sym
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{amd_order, dense_cholesky};
    use approx::assert_abs_diff_eq;

    fn two_by_two() -> SparseSymMatrix {
        SparseSymMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap()
    }

    #[test]
    fn factor_of_small_spd() {
        let f = factorize(&two_by_two(), &Permutation::identity(2)).unwrap();
        let l = f.l_dense();
        assert_abs_diff_eq!(l[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 1)], 2.0_f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        let dense = dense_cholesky(&two_by_two().to_dense()).unwrap();
        assert_abs_diff_eq!(dense, l, epsilon = 1e-15);
    }

    #[test]
    fn identity_factor() {
        let f = factorize(&SparseSymMatrix::identity(4), &Permutation::identity(4)).unwrap();
        assert_eq!(f.fill_count(), 4);
        assert_eq!(f.l_dense(), DMatrix::identity(4, 4));
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = SparseSymMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        let err = factorize(&a, &Permutation::identity(2)).unwrap_err();
        assert!(matches!(err, LinalgError::NotPositiveDefinite { column: 1, .. }));
    }

    #[test]
    fn solves_by_hand() {
        let f = factorize(&SparseSymMatrix::identity(2), &Permutation::identity(2)).unwrap();
        assert_eq!(f.solve_lower(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        let f = factorize(&two_by_two(), &Permutation::identity(2)).unwrap();
        let x = f.solve_lower(&[2.0, 1.0 + 2.0_f64.sqrt()]).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-15);
        assert!(f.solve_upper(&[1.0]).is_err());
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // Singular PSD matrix: [[1,1],[1,1]].
        let a = SparseSymMatrix::from_dense(&DMatrix::from_element(2, 2, 1.0)).unwrap();
        let sym = SymbolicCholesky::analyze(&a, &Permutation::identity(2)).unwrap();
        let (f, tau) = factorize_with_jitter(&sym, &a).unwrap();
        assert!(tau > 0.0 && tau <= 1e-4);
        // Reproducible from the recorded jitter.
        let g = sym.factorize(&a.add_diagonal(tau)).unwrap();
        assert_eq!(f.values(), g.values());
        let indefinite = SparseSymMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(factorize_with_jitter(&sym, &indefinite).is_err());
    }

    #[test]
    fn covariance_examples() {
        let s = precision_to_cov(&SparseSymMatrix::identity(3), None).unwrap();
        assert_eq!(s, DMatrix::identity(3, 3));
        let s = precision_to_cov(&SparseSymMatrix::diagonal(&[4.0, 0.25]), None).unwrap();
        assert_abs_diff_eq!(s, DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 4.0]), epsilon = 1e-15);
        // Q = Σ⁻¹ for unit variances and ρ = 0.8: Q = [[1, -ρ], [-ρ, 1]] / (1 - ρ²).
        let rho: f64 = 0.8;
        let d = 1.0 - rho * rho;
        let q = SparseSymMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0 / d, -rho / d, -rho / d, 1.0 / d])).unwrap();
        let s = precision_to_cov(&q, None).unwrap();
        assert_abs_diff_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]), epsilon = 1e-9);
        assert!(matches!(
            precision_to_cov(&SparseSymMatrix::identity(4), Some(3)),
            Err(LinalgError::DimensionTooLarge { dim: 4, cap: 3 })
        ));
    }

    #[test]
    fn products_invert_solves() {
        let mut trip = Vec::new();
        for i in 0..6 {
            trip.push((i, i, 4.0 + i as f64));
            if i + 2 < 6 {
                trip.push((i + 2, i, -1.0));
            }
        }
        trip.push((5, 0, 0.5));
        let a = SparseSymMatrix::from_triplets(6, &trip).unwrap();
        let f = factorize(&a, &amd_order(&a)).unwrap();
        let b = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let mut y = [0.0; 6];
        f.mul_lower(&f.solve_lower(&b).unwrap(), &mut y).unwrap();
        for (u, v) in y.iter().zip(b.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
        f.mul_upper(&f.solve_upper(&b).unwrap(), &mut y).unwrap();
        for (u, v) in y.iter().zip(b.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
        let x = f.solve(&b).unwrap();
        let back = a.mul_vec(&x).unwrap();
        for (u, v) in back.iter().zip(b.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }
}
