//! Small dense linear-algebra helpers shared by the fitting code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_RTOL: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse via SVD, truncating singular values below
/// `PINV_RTOL` times the largest one.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { PINV_RTOL * smax } else { f64::MAX };
    svd.pseudo_inverse(eps)
        .expect("SVD computed with both factors")
}

/// Solves the square system `a x = b` by column-pivoted QR and reports the
/// reciprocal condition number estimated from the R diagonal.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = a.nrows();
    if n != a.ncols() || n != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "solve_square: a is {}x{}, b has length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for i in 0..n {
        let d = r[(i, i)].abs();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    let rcond = if dmax > 0.0 { dmin / dmax } else { 0.0 };
    if rcond < 1e-12 || !rcond.is_finite() {
        return Err(Error::SingularSystem { rcond });
    }
    let x = qr
        .solve(b)
        .ok_or(Error::SingularSystem { rcond })?;
    Ok((x, rcond))
}

/// Solves a symmetric positive-definite system via Cholesky with a QR
/// fallback. Returns `None` if the matrix is numerically singular.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(b));
    }
    solve_square(a, b).ok().map(|(x, _)| x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pinv_inverts_nonsingular() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = pinv(&a);
        let id = &a * &p;
        assert_relative_eq!(id[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(id[(1, 1)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(id[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pinv_rank_deficient_is_least_squares() {
        // rank-1 matrix; pinv solution must satisfy the normal equations
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let p = pinv(&a);
        // A A+ A = A
        let back = &a * &p * &a;
        for i in 0..4 {
            assert_relative_eq!(back.as_slice()[i], a.as_slice()[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn solve_square_reports_singularity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        match solve_square(&a, &b) {
            Err(Error::SingularSystem { rcond }) => assert!(rcond < 1e-12),
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn solve_square_solves() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![5.0, 5.0]);
        let (x, rcond) = solve_square(&a, &b).unwrap();
        assert!(rcond > 0.1);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-12);
    }
}
