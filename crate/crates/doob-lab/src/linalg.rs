//! Dense linear algebra for the small (d <= ~16) covariance matrices the
//! oracles work with: Cholesky factorization, triangular solves and SPD solves.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::numerical("cholesky: matrix not square"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::numerical(format!(
                        "cholesky: matrix not positive definite (pivot {s:.3e} at {i})"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve L x = b with L lower triangular.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let v = x[k];
            x[i] -= l[[i, k]] * v;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solve L^T x = b with L lower triangular.
pub fn solve_lower_t(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = x[k];
            x[i] -= l[[k, i]] * v;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solve (L L^T) x = b.
pub fn chol_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    solve_lower_t(l, solve_lower(l, b).view())
}

/// Solve (L L^T) X = B column-by-column; B is n x m.
pub fn chol_solve_mat(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&chol_solve(l, col));
    }
    out
}

/// Apply (L L^T)^{-1} to every row of `rows`; rows is n x d, L is d x d.
pub fn chol_solve_rows(l: ArrayView2<f64>, rows: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(rows.raw_dim());
    for (i, row) in rows.outer_iter().enumerate() {
        out.row_mut(i).assign(&chol_solve(l, row));
    }
    out
}

/// log det of (L L^T).
pub fn chol_log_det(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Symmetrize in place (guards against drift in repeated conjugations).
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_round_trip() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let b = array![1.0, -2.0, 0.5];
        let x = chol_solve(l.view(), b.view());
        let r = a.dot(&x);
        for (u, v) in r.iter().zip(b.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            chol_log_det(l.view()),
            (4.0f64 * 5.0 * 3.0 * (1.0 - 0.2f64.powi(2) / 1.0)).ln(),
            epsilon = 0.5
        );
    }

    #[test]
    fn rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_err());
    }
}
