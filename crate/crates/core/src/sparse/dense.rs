use nalgebra::DMatrix;

use super::{LinalgError, Result};

/// Lower Cholesky factor of a dense symmetric positive definite matrix.
/// Only the lower triangle of `s` is read.
pub fn dense_cholesky(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, got: s.ncols() });
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { column: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for dense lower-triangular `L`, in place.
pub fn dense_solve_lower(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ x = b` for dense lower-triangular `L`, in place.
pub fn dense_solve_upper(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dense_examples() {
        let l = dense_cholesky(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap();
        assert_abs_diff_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.41421356237309505]), epsilon = 1e-14);
        assert_eq!(dense_cholesky(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        assert!(matches!(
            dense_cholesky(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            Err(LinalgError::NotPositiveDefinite { column: 1, .. })
        ));
    }

    #[test]
    fn triangular_solves() {
        let l = dense_cholesky(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap();
        let mut x = [2.0, 1.0 + 2.0_f64.sqrt()];
        dense_solve_lower(&l, &mut x);
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-15);
        let mut y = [3.0, 2.0_f64.sqrt()];
        dense_solve_upper(&l, &mut y);
        // Lᵀ (1, 1) = (3, √2)
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 1.0, epsilon = 1e-15);
    }
}
