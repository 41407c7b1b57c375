//! Small dense linear-algebra helpers over `ndarray`, backed by `nalgebra`.

use nalgebra::DMatrix;
use ndarray::Array2;

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Numerical rank from singular values, with the usual `max(n, k)·ε·σ_max` cutoff.
pub fn matrix_rank(a: &Array2<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = to_na(a).singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * max;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Least-squares coefficients `(XᵀX)⁻¹XᵀY` for every column of `y` at once.
///
/// Returns `None` when `x` does not have full column rank.
pub fn least_squares(x: &Array2<f64>, y: &Array2<f64>) -> Option<Array2<f64>> {
    assert_eq!(x.nrows(), y.nrows());
    if x.ncols() == 0 {
        return Some(Array2::zeros((0, y.ncols())));
    }
    if matrix_rank(x) < x.ncols() {
        return None;
    }
    let xt = x.t();
    let gram = to_na(&xt.dot(x));
    let rhs = to_na(&xt.dot(y));
    let chol = gram.cholesky()?;
    Some(from_na(&chol.solve(&rhs)))
}
