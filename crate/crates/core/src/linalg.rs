//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `a x = b` for symmetric positive definite `a` (row-major, k×k).
/// Returns `None` when `a` is not numerically positive definite.
pub(crate) fn solve_spd(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let k = b.len();
    let m = DMatrix::from_row_slice(k, k, a);
    let chol = m.cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(b));
    if x.iter().all(|v| v.is_finite()) {
        Some(x.iter().copied().collect())
    } else {
        None
    }
}

/// Symmetric square root of a positive semidefinite matrix.
///
/// Eigenvalues below `-1e-10` are rejected; the remaining negative ones are
/// treated as rounding noise and clipped to zero.
pub fn psd_sqrt(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !v.is_square() {
        return Err(Error::invalid("covariance matrix must be square"));
    }
    let d = v.nrows();
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (v[(i, j)], v[(j, i)]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::invalid("covariance matrix must be symmetric"));
            }
        }
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("covariance matrix has non-finite entries"));
    }
    // Error-free coordinates have exactly zero rows; keep them out of the
    // eigendecomposition so their square-root rows stay exactly zero.
    let active: Vec<usize> = (0..d)
        .filter(|&i| (0..d).any(|j| v[(i, j)] != 0.0))
        .collect();
    let mut root = DMatrix::zeros(d, d);
    if active.is_empty() {
        return Ok(root);
    }
    let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| {
        0.5 * (v[(active[i], active[j])] + v[(active[j], active[i])])
    });
    let eig = sub.symmetric_eigen();
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -1e-10 {
            return Err(Error::invalid(format!(
                "covariance matrix is not positive semidefinite (eigenvalue {min:e})"
            )));
        }
    }
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let sub_root =
        &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            root[(i, j)] = sub_root[(a, b)];
        }
    }
    Ok(root)
}

/// Ordinary least squares through a QR factorization.
pub(crate) fn least_squares(design: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let (n, k) = design.shape();
    if n < k {
        return Err(Error::invalid("fewer observations than coefficients"));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if r.diagonal()
        .iter()
        .any(|v| v.abs() <= 1e-12 * scale.max(1.0))
    {
        return Err(Error::invalid("least-squares design is rank deficient"));
    }
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::invalid("least-squares design is rank deficient"))?;
    Ok(coef.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let v = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.3, 0.0, 0.0, 0.0, 0.0]);
        let r = psd_sqrt(&v).unwrap();
        let back = &r * &r;
        for (a, b) in back.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(r.row(2).iter().all(|&x| x == 0.0));
        assert!(r.column(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_sqrt(&v).is_err());
    }

    #[test]
    fn sqrt_rejects_asymmetric() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(psd_sqrt(&v).is_err());
    }

    #[test]
    fn spd_solve() {
        let x = solve_spd(&[4.0, 1.0, 1.0, 3.0], &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        assert!(solve_spd(&[1.0, 2.0, 2.0, 1.0], &[1.0, 1.0]).is_none());
    }
}
