//! Thin least-squares layer over nalgebra's column-pivoted QR.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition-estimate ceiling above which a design is treated as rank
/// deficient.
pub(crate) const MAX_CONDITION: f64 = 1e12;

/// Minimize `||a x - b||_2` for a tall matrix `a` (n >= m).
///
/// Returns `RankDeficient` when the diagonal of the pivoted R factor spans
/// more than [`MAX_CONDITION`] orders of magnitude.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, m) = a.shape();
    debug_assert!(n >= m && n == b.len());
    let qr = a.clone().col_piv_qr();
    let (q, r, p) = qr.unpack();

    let mut dmax = 0.0_f64;
    let mut dmin = f64::INFINITY;
    for i in 0..m {
        let d = r[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    let cond = if dmin == 0.0 {
        f64::INFINITY
    } else {
        dmax / dmin
    };
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::RankDeficient { cond });
    }

    let qtb = q.transpose() * b;
    let mut coefs = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { cond })?;
    // QR factored A*P; undo the column permutation to index original columns.
    p.inv_permute_rows(&mut coefs);
    Ok(coefs)
}

/// Design matrix `[1 | X]` with an intercept column prepended.
pub(crate) fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, x.ncols() + 1);
    for i in 0..n {
        out[(i, 0)] = 1.0;
        for j in 0..x.ncols() {
            out[(i, j + 1)] = x[(i, j)];
        }
    }
    out
}

/// Horizontal concatenation of two matrices with equal row counts.
pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, a.ncols() + b.ncols());
    for i in 0..n {
        for j in 0..a.ncols() {
            out[(i, j)] = a[(i, j)];
        }
        for j in 0..b.ncols() {
            out[(i, a.ncols() + j)] = b[(i, j)];
        }
    }
    out
}
