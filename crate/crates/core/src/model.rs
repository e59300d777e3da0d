//! PARAFAC2 factor container, reconstruction, loss, and constraint
//! diagnostics.
//!
//! A model is `X_k ~ A D_k B_k^T` with `A: I x R`, per-slice `B_k: J_k x R`,
//! and `C: K x R` holding the diagonals of the `D_k` as rows. `D_k` is never
//! materialized; every kernel scales columns by the corresponding row of `C`.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::stack::{DimSpec, MaskStack, SliceStack};

#[derive(Debug, Clone, PartialEq)]
pub struct Parafac2Factors {
    /// Static first-mode factor, `I x R`.
    pub a: Array2<f64>,
    /// Evolving second-mode factors, `J_k x R` each.
    pub b: Vec<Array2<f64>>,
    /// Third-mode strengths, `K x R`; row k is the diagonal of `D_k`.
    pub c: Array2<f64>,
}

impl Parafac2Factors {
    pub fn new(a: Array2<f64>, b: Vec<Array2<f64>>, c: Array2<f64>) -> Result<Self> {
        let f = Parafac2Factors { a, b, c };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.a.ncols();
        if r == 0 {
            return Err(Error::InvalidInput("rank must be >= 1".into()));
        }
        if self.b.is_empty() {
            return Err(Error::InvalidInput("factors need at least one slice".into()));
        }
        if self.c.nrows() != self.b.len() {
            return Err(Error::ShapeMismatch(format!(
                "C has {} rows but there are {} B_k",
                self.c.nrows(),
                self.b.len()
            )));
        }
        if self.c.ncols() != r {
            return Err(Error::ShapeMismatch(format!(
                "C has {} columns, expected {}",
                self.c.ncols(),
                r
            )));
        }
        for (k, bk) in self.b.iter().enumerate() {
            if bk.ncols() != r {
                return Err(Error::ShapeMismatch(format!(
                    "B_{} has {} columns, expected {}",
                    k,
                    bk.ncols(),
                    r
                )));
            }
            if bk.nrows() == 0 {
                return Err(Error::InvalidInput(format!("B_{} has no rows", k)));
            }
        }
        let finite = self.a.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.b.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidInput("factors contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn dims(&self) -> DimSpec {
        DimSpec {
            i: self.a.nrows(),
            k: self.b.len(),
            j: self.b.iter().map(|b| b.nrows()).collect(),
        }
    }

    /// `A diag(C(k,:)) B_k^T` for one slice.
    pub fn reconstruct_slice(&self, k: usize) -> Array2<f64> {
        let scaled = &self.a * &self.c.row(k);
        scaled.dot(&self.b[k].t())
    }

    /// Full model estimate as a slice stack.
    pub fn reconstruct(&self) -> SliceStack {
        let slices = (0..self.b.len()).map(|k| self.reconstruct_slice(k)).collect();
        SliceStack::new(slices).expect("validated factors reconstruct to a valid stack")
    }

    /// Gram matrix `B_k^T B_k` of one evolving factor.
    pub fn b_gram(&self, k: usize) -> Array2<f64> {
        self.b[k].t().dot(&self.b[k])
    }
}

/// Regularized (optionally masked) model loss:
/// the squared residual plus ridge and temporal penalties.
pub fn loss(
    f: &Parafac2Factors,
    x: &SliceStack,
    cfg: &SolverConfig,
    mask: Option<&MaskStack>,
) -> Result<f64> {
    cfg.validate()?;
    if f.dims() != x.dims() {
        return Err(Error::ShapeMismatch(format!(
            "factors {:?} vs data {:?}",
            f.dims(),
            x.dims()
        )));
    }
    if cfg.lambda_b > 0.0 && x.dims().uniform_j().is_none() {
        return Err(Error::InvalidInput(
            "temporal penalty requires all J_k equal".into(),
        ));
    }

    let mut total = 0.0;
    for k in 0..x.n_slices() {
        let rec = f.reconstruct_slice(k);
        match mask {
            None => {
                for (v, w) in x.slice(k).iter().zip(rec.iter()) {
                    let r = v - w;
                    total += r * r;
                }
            }
            Some(m) => {
                if m.dims() != x.dims() {
                    return Err(Error::ShapeMismatch("mask vs data".into()));
                }
                for ((v, w), ind) in x.slice(k).iter().zip(rec.iter()).zip(m.slice(k).iter()) {
                    let r = ind * (v - w);
                    total += r * r;
                }
            }
        }
    }
    if cfg.lambda_a > 0.0 {
        total += cfg.lambda_a * f.a.iter().map(|v| v * v).sum::<f64>();
    }
    if cfg.lambda_d > 0.0 {
        total += cfg.lambda_d * f.c.iter().map(|v| v * v).sum::<f64>();
    }
    if cfg.lambda_b > 0.0 {
        for k in 1..f.b.len() {
            let d = &f.b[k] - &f.b[k - 1];
            total += cfg.lambda_b * d.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(total)
}

/// Relative distances between ADMM primal factors and their auxiliaries;
/// each must fall below the feasibility tolerance for a run to count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeasibilityGaps {
    /// `B_k` vs the smoothness auxiliary `Z_{B_k}` (stacked over k).
    pub b_smooth: f64,
    /// `B_k` vs the constraint auxiliary `Y_{B_k}` (stacked over k).
    pub b_projection: f64,
    /// `D_k` diagonals vs `Z_{D_k}`.
    pub d: f64,
    /// `A` vs `Z_A`; present only for solvers that split `A`.
    pub a: Option<f64>,
}

impl FeasibilityGaps {
    pub fn max(&self) -> f64 {
        self.b_smooth
            .max(self.b_projection)
            .max(self.d)
            .max(self.a.unwrap_or(0.0))
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.max() < tol
    }
}

/// Cross-product constraint diagnostics for a factor set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Largest relative deviation of any `B_k^T B_k` from the mean Gram,
    /// normalized by `|B_1^T B_1|`. Zero exactly when the constraint holds.
    pub max_crossprod_deviation: f64,
    /// Solver feasibility gaps; absent for factors checked in isolation.
    pub feasibility_gaps: Option<FeasibilityGaps>,
}

/// Measures how far a factor set is from the constant cross-product
/// constraint. Uses the deviation from the mean Gram (linear in K); the
/// all-pairs maximum lies within a factor of two of this value and shares
/// its zero set.
pub fn check_constraint(f: &Parafac2Factors) -> ConstraintReport {
    let k = f.b.len();
    let r = f.rank();
    let mut mean = Array2::<f64>::zeros((r, r));
    let grams: Vec<Array2<f64>> = (0..k).map(|kk| f.b_gram(kk)).collect();
    for g in &grams {
        mean = mean + g;
    }
    mean /= k as f64;

    let denom = grams[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    let max_dev = grams
        .iter()
        .map(|g| (g - &mean).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    let max_crossprod_deviation = if denom == 0.0 {
        if max_dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        max_dev / denom
    };
    ConstraintReport {
        max_crossprod_deviation,
        feasibility_gaps: None,
    }
}

pub(crate) fn scale_columns(m: &Array2<f64>, d: ArrayView1<f64>) -> Array2<f64> {
    m * &d
}
