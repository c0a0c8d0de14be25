//! Small dense helpers shared by the fitters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if a.nrows() == 0 {
        return Cholesky::new(DMatrix::zeros(0, 0));
    }
    Cholesky::new(a.clone())
}

pub(crate) fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse and log-determinant of an SPD matrix.
pub(crate) fn spd_inverse_logdet(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if a.nrows() == 0 {
        return Some((DMatrix::zeros(0, 0), 0.0));
    }
    let c = cholesky(a)?;
    let logdet = chol_logdet(&c);
    logdet.is_finite().then(|| (c.inverse(), logdet))
}

pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let x = cholesky(a)?.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Ordinary least squares through the normal equations.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let xtx = x.tr_mul(x);
    let xty = x.tr_mul(y);
    solve_spd(&xtx, &xty)
}

/// Weighted least squares, weights on the squared residuals.
pub(crate) fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Option<DVector<f64>> {
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    solve_spd(&xw.tr_mul(x), &xw.tr_mul(y))
}

/// `[a | b]` column concatenation.
pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Columns of `z` at `idx`.
pub(crate) fn select_columns(z: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), idx.len(), |i, j| z[(i, idx[j])])
}
