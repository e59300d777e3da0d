//! Small dense kernels shared by the solvers.
//!
//! Matrices live in `ndarray`; factorizations (Cholesky/LU/SVD) go through
//! `nalgebra` on small converted copies. Systems here are R x R with R in
//! the single digits, so conversion cost is irrelevant.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub(crate) fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().cloned())
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves `out * G = rhs` for a symmetric positive (semi)definite `G`,
/// i.e. applies `G^{-1}` from the right to every row of `rhs`.
///
/// Cholesky first, LU as fallback; an exactly singular system is an error.
pub fn solve_gram(gram: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let r = gram.nrows();
    debug_assert_eq!(gram.ncols(), r);
    debug_assert_eq!(rhs.ncols(), r);
    let g = to_nalgebra(gram);
    // G is symmetric, so solving G * X^T = RHS^T gives X = RHS * G^{-1}.
    let rhs_t = to_nalgebra(rhs).transpose();
    let solved = match nalgebra::Cholesky::new(g.clone()) {
        Some(chol) => chol.solve(&rhs_t),
        None => g
            .lu()
            .solve(&rhs_t)
            .ok_or_else(|| Error::SingularSystem(format!("{}x{} gram system", r, r)))?,
    };
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(format!(
            "{}x{} gram system produced non-finite solution",
            r, r
        )));
    }
    Ok(from_nalgebra(&solved.transpose()))
}

/// Same as [`solve_gram`] for a single row.
pub fn solve_gram_vec(gram: &Array2<f64>, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    let rhs2 = rhs
        .clone()
        .into_shape_with_order((1, rhs.len()))
        .expect("row reshape");
    Ok(solve_gram(gram, &rhs2)?.row(0).to_owned())
}

/// Packed Cholesky factorization of a small SPD matrix, sized for the
/// rank-by-rank normal systems the solvers produce in bulk. Solves reuse
/// caller buffers; no allocation after `factor`.
pub struct SmallSpd {
    l: Vec<f64>,
    n: usize,
}

impl SmallSpd {
    /// `None` when the matrix is not numerically positive definite;
    /// callers fall back to the pivoted dense path.
    pub fn factor(g: &Array2<f64>) -> Option<SmallSpd> {
        let n = g.nrows();
        debug_assert_eq!(g.ncols(), n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = g[(i, j)];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(SmallSpd { l, n })
    }

    /// Solves `G x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.l[i * n + k] * b[k];
            }
            b[i] = sum / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = b[i];
            for k in i + 1..n {
                sum -= self.l[k * n + i] * b[k];
            }
            b[i] = sum / self.l[i * n + i];
        }
    }
}

/// Reusable factorization of one normal matrix: Cholesky when positive
/// definite, pivoted dense solve otherwise.
pub struct GramSolver {
    chol: Option<SmallSpd>,
    gram: Array2<f64>,
}

impl GramSolver {
    pub fn new(gram: Array2<f64>) -> GramSolver {
        GramSolver {
            chol: SmallSpd::factor(&gram),
            gram,
        }
    }

    /// Solves `row * G = row` for every row in place.
    pub fn solve_rows_in_place(&self, rows: &mut Array2<f64>) -> Result<()> {
        match &self.chol {
            Some(chol) => {
                for mut row in rows.rows_mut() {
                    chol.solve_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                Ok(())
            }
            None => {
                let solved = solve_gram(&self.gram, rows)?;
                rows.assign(&solved);
                Ok(())
            }
        }
    }
}

/// `sum over rows i with weight[i] != 0 of m_i m_i^T` without temporaries.
pub fn weighted_row_gram(m: &Array2<f64>, weights: ndarray::ArrayView1<f64>) -> Array2<f64> {
    let (n, r) = (m.nrows(), m.ncols());
    debug_assert_eq!(weights.len(), n);
    let mut g = Array2::<f64>::zeros((r, r));
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        let row = m.row(i);
        for p in 0..r {
            let mp = row[p];
            for q in 0..=p {
                g[(p, q)] += mp * row[q];
            }
        }
    }
    for p in 0..r {
        for q in p + 1..r {
            g[(p, q)] = g[(q, p)];
        }
    }
    g
}

/// Thin SVD `m = U diag(s) V^T` with `U: n x p`, `V^T: p x p` for `p = min(n, m)`.
pub fn thin_svd(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let svd = to_nalgebra(m).svd(true, true);
    let u = from_nalgebra(&svd.u.expect("svd requested u"));
    let vt = from_nalgebra(&svd.v_t.expect("svd requested v_t"));
    let s = Array1::from_iter(svd.singular_values.iter().cloned());
    (u, s, vt)
}

/// Orthogonal-Procrustes factor: the `U V^T` of the thin SVD of `m`.
///
/// Returns the orthonormal-column matrix closest to `m` in the sense of
/// maximizing `trace(P^T m)`.
pub fn procrustes(m: &Array2<f64>) -> Array2<f64> {
    let (u, _s, vt) = thin_svd(m);
    u.dot(&vt)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max_sym(m: &Array2<f64>) -> f64 {
    to_nalgebra(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest column-orthonormality defect `max |P^T P - I|`.
pub fn orthonormality_defect(p: &Array2<f64>) -> f64 {
    let g = p.t().dot(p);
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Relative Frobenius distance `|a - b| / max(|b|, tiny)`; 0 when both empty.
pub fn relative_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}
