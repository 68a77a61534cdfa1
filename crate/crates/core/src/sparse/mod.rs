//! Sparse symmetric storage, fill-reducing ordering, simplicial Cholesky
//! factorization and triangular solves.
//!
//! Matrices are stored as the lower triangle (diagonal included) in
//! compressed-sparse-column form. Every diagonal entry is structurally
//! present, and numeric zeros are kept in the pattern so that fill counts
//! only depend on structure.

mod cholesky;
mod dense;
mod ordering;

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use thiserror::Error;

pub(crate) use cholesky::factor_inverse;
pub use cholesky::{factorize, factorize_with_jitter, precision_to_cov, CholeskyFactor, SymbolicCholesky};
pub use dense::{dense_cholesky, dense_solve_lower, dense_solve_upper};
pub use ordering::{amd_order, approximate_minimum_degree, symbolic_fill};

/// Default cap on the dimension of dense outputs such as `Q⁻¹`.
pub const DEFAULT_DENSE_CAP: usize = 5000;

/// Jitter multipliers tried (relative to `max |diag|`) when a factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension {dim} exceeds dense cap {cap}")]
    DimensionTooLarge { dim: usize, cap: usize },
    #[error("invalid sparse structure: {0}")]
    InvalidStructure(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;

/// Symmetric matrix stored as its lower triangle in CSC form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    dim: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds a matrix from raw CSC arrays, checking every structural invariant.
    pub fn from_csc(dim: usize, col_ptr: Vec<usize>, row_idx: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let m = Self { dim, col_ptr, row_idx, values };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix from `(row, col, value)` triplets. Entries may come from
    /// either triangle; they are mirrored into the lower triangle and
    /// duplicates are summed. Missing diagonal entries are inserted as zeros.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for (j, col) in cols.iter_mut().enumerate() {
            col.push((j, 0.0));
        }
        for &(r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(LinalgError::InvalidStructure(format!(
                    "entry ({r}, {c}) outside a {dim}x{dim} matrix"
                )));
            }
            let (i, j) = if r >= c { (r, c) } else { (c, r) };
            cols[j].push((i, v));
        }
        let mut col_ptr = Vec::with_capacity(dim + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_by_key(|&(i, _)| i);
            let mut last = usize::MAX;
            for &(i, v) in col.iter() {
                if i == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                    last = i;
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self { dim, col_ptr, row_idx, values })
    }

    /// Pattern from the nonzero entries of a dense matrix's lower triangle.
    pub fn from_dense(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(LinalgError::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
        }
        let n = a.nrows();
        let mut trip = Vec::new();
        for j in 0..n {
            for i in j..n {
                let v = a[(i, j)];
                if v != 0.0 || i == j {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &trip)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        Self {
            dim,
            col_ptr: (0..=dim).collect(),
            row_idx: (0..dim).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored entries in the lower triangle, diagonal included.
    pub fn nnz(&self) -> usize {
        self.values.len()
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

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(row, value)` pairs stored in column `j`, diagonal first.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    /// Entry `(i, j)` of the full symmetric matrix (zero when not stored).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[range.clone()].binary_search(&r) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|j| self.values[self.col_ptr[j]]).collect()
    }

    pub fn max_abs_diag(&self) -> f64 {
        self.diag().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Copy with `tau` added to every diagonal entry.
    pub fn add_diagonal(&self, tau: f64) -> Self {
        let mut out = self.clone();
        for j in 0..self.dim {
            out.values[out.col_ptr[j]] += tau;
        }
        out
    }

    /// `y = A x` using both triangles.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut y = vec![0.0; self.dim];
        for j in 0..self.dim {
            for (i, v) in self.column(j) {
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.dim, self.dim);
        for j in 0..self.dim {
            for (i, v) in self.column(j) {
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    /// `P A Pᵀ`, i.e. entry `(i, j)` of the result is `A[perm[i], perm[j]]`.
    pub fn permuted(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: perm.len() });
        }
        let inv = perm.inverse();
        let mut trip = Vec::with_capacity(self.nnz());
        for j in 0..self.dim {
            for (i, v) in self.column(j) {
                trip.push((inv[i], inv[j], v));
            }
        }
        Self::from_triplets(self.dim, &trip)
    }

    /// Percentage of structural zeros in the strict lower triangle.
    pub fn sparsity_percent(&self) -> f64 {
        sparsity_percent(self)
    }

    /// Checks the CSC invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LinalgError::InvalidStructure(msg));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if self.col_ptr.len() != self.dim + 1 || self.col_ptr[0] != 0 {
            return bad("column pointer array has the wrong shape".into());
        }
        if *self.col_ptr.last().unwrap() != self.values.len() || self.values.len() != self.row_idx.len() {
            return bad("value count does not match the last column pointer".into());
        }
        for j in 0..self.dim {
            let (start, end) = (self.col_ptr[j], self.col_ptr[j + 1]);
            if start >= end || self.row_idx[start] != j {
                return bad(format!("diagonal entry of column {j} is missing"));
            }
            for w in self.row_idx[start..end].windows(2) {
                if w[1] <= w[0] {
                    return bad(format!("row indices of column {j} are not strictly increasing"));
                }
            }
            if self.row_idx[end - 1] >= self.dim {
                return bad(format!("row index out of range in column {j}"));
            }
        }
        Ok(())
    }

    /// Writes the `%%sparse-sym dim nnz` text format (0-based triplets).
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%sparse-sym {} {}", self.dim, self.nnz())?;
        let mut line = String::new();
        for j in 0..self.dim {
            for (i, v) in self.column(j) {
                line.clear();
                let _ = write!(line, "{i} {j} {v:e}");
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Reads the format produced by [`SparseSymMatrix::write_text`].
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (dim, nnz) = loop {
            let (no, line) = lines.next().ok_or(LinalgError::Parse { line: 0, msg: "empty input".into() })?;
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let mut parts = t.split_whitespace();
            if parts.next() != Some("%%sparse-sym") {
                return Err(LinalgError::Parse { line: no + 1, msg: "missing %%sparse-sym header".into() });
            }
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|s| s.parse().ok())
                    .ok_or(LinalgError::Parse { line: no + 1, msg: "bad header".into() })
            };
            break (parse(parts.next())?, parse(parts.next())?);
        };
        let mut trip = Vec::with_capacity(nnz);
        for (no, line) in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let mut parts = t.split_whitespace();
            let err = || LinalgError::Parse { line: no + 1, msg: format!("bad triplet `{t}`") };
            let i: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(err)?;
            let j: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(err)?;
            let v: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(err)?;
            trip.push((i, j, v));
        }
        if trip.len() != nnz {
            return Err(LinalgError::Parse {
                line: 0,
                msg: format!("header declares {nnz} entries, found {}", trip.len()),
            });
        }
        let m = Self::from_triplets(dim, &trip)?;
        m.validate()?;
        Ok(m)
    }
}

/// `100 × (structural zeros in the strict lower triangle) / (n(n−1)/2)`.
pub fn sparsity_percent(a: &SparseSymMatrix) -> f64 {
    let n = a.dim();
    if n <= 1 {
        return 0.0;
    }
    let total = (n * (n - 1) / 2) as f64;
    let off_diag = (a.nnz() - n) as f64;
    100.0 * (total - off_diag) / total
}

/// A bijection on `0..n`. `forward[new] = old`, matching `P A Pᵀ` where
/// `(P x)[i] = x[forward[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self { forward: (0..n).collect(), inverse: (0..n).collect() }
    }

    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in forward.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(LinalgError::InvalidStructure("permutation is not a bijection".into()));
            }
            inverse[old] = new;
        }
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// `y = P x`, `y[i] = x[forward[i]]`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (yi, &p) in y.iter_mut().zip(&self.forward) {
            *yi = x[p];
        }
    }

    /// `x = Pᵀ y`, `x[forward[i]] = y[i]`.
    pub fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        for (&yi, &p) in y.iter().zip(&self.forward) {
            x[p] = yi;
        }
    }
}
