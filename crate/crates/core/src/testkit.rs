//! Shared helpers for unit tests. Oracles here are deliberately independent
//! of the production linear-algebra path.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::Parafac2Factors;

pub fn random_matrix(n: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, m), |_| rng.random::<f64>() * 2.0 - 1.0)
}

pub fn random_factors(i: usize, j: Vec<usize>, r: usize, seed: u64) -> Parafac2Factors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw =
        |n: usize, m: usize| Array2::from_shape_fn((n, m), |_| rng.random::<f64>() * 2.0 - 1.0);
    let a = draw(i, r);
    let k = j.len();
    let b = j.iter().map(|&jj| draw(jj, r)).collect();
    // Positive strengths keep non-negativity fixed points exact in tests.
    let mut c = draw(k, r);
    c.map_inplace(|v| *v = v.abs() + 0.25);
    Parafac2Factors::new(a, b, c).unwrap()
}

/// Plain Gauss-Jordan elimination with partial pivoting; test oracle only.
pub fn gauss_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if m[(row, col)].abs() > m[(piv, col)].abs() {
                piv = row;
            }
        }
        for c in 0..n {
            let tmp = m[(col, c)];
            m[(col, c)] = m[(piv, c)];
            m[(piv, c)] = tmp;
        }
        x.swap(col, piv);
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[(row, col)] / m[(col, col)];
            for c in 0..n {
                m[(row, c)] -= f * m[(col, c)];
            }
            x[row] -= f * x[col];
        }
    }
    Array1::from_shape_fn(n, |i| x[i] / m[(i, i)])
}
