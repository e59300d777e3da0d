//! Frontal-slice stacks and observation masks.
//!
//! A third-order tensor with a possibly ragged second mode is held as an
//! ordered list of K dense frontal slices `X_k` of shape `I x J_k`. Masks
//! are congruent stacks of 0/1 indicators (1 = observed).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape descriptor for a slice stack: first-mode size `I`, `K` slices,
/// per-slice column counts `J`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimSpec {
    pub i: usize,
    pub k: usize,
    pub j: Vec<usize>,
}

impl DimSpec {
    pub fn new(i: usize, j: Vec<usize>) -> Result<Self> {
        let k = j.len();
        let spec = DimSpec { i, k, j };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform second mode: `I x J x K`.
    pub fn uniform(i: usize, j: usize, k: usize) -> Result<Self> {
        Self::new(i, vec![j; k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.i == 0 {
            return Err(Error::InvalidInput("I must be >= 1".into()));
        }
        if self.k == 0 || self.j.is_empty() {
            return Err(Error::InvalidInput("K must be >= 1".into()));
        }
        if self.j.len() != self.k {
            return Err(Error::InvalidInput(format!(
                "J has {} entries but K = {}",
                self.j.len(),
                self.k
            )));
        }
        if self.j.iter().any(|&j| j == 0) {
            return Err(Error::InvalidInput("all J_k must be >= 1".into()));
        }
        Ok(())
    }

    /// `Some(J)` when every slice has the same column count.
    pub fn uniform_j(&self) -> Option<usize> {
        let j0 = self.j[0];
        self.j.iter().all(|&j| j == j0).then_some(j0)
    }

    /// Total number of entries across all slices.
    pub fn n_entries(&self) -> usize {
        self.j.iter().map(|&j| self.i * j).sum()
    }
}

/// Ordered list of K frontal slices `X_k` (`I x J_k`), ragged in J.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    slices: Vec<Array2<f64>>,
}

impl SliceStack {
    /// Validates the shared row count, nonempty dimensions, and finiteness.
    pub fn new(slices: Vec<Array2<f64>>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidInput("stack needs at least one slice".into()));
        }
        let i = slices[0].nrows();
        if i == 0 {
            return Err(Error::InvalidInput("I must be >= 1".into()));
        }
        for (k, s) in slices.iter().enumerate() {
            if s.nrows() != i {
                return Err(Error::ShapeMismatch(format!(
                    "slice {} has {} rows, expected {}",
                    k,
                    s.nrows(),
                    i
                )));
            }
            if s.ncols() == 0 {
                return Err(Error::InvalidInput(format!("slice {} has no columns", k)));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "slice {} contains non-finite values",
                    k
                )));
            }
        }
        Ok(SliceStack { slices })
    }

    pub fn zeros(dims: &DimSpec) -> Result<Self> {
        dims.validate()?;
        Ok(SliceStack {
            slices: dims.j.iter().map(|&j| Array2::zeros((dims.i, j))).collect(),
        })
    }

    pub fn dims(&self) -> DimSpec {
        DimSpec {
            i: self.n_rows(),
            k: self.n_slices(),
            j: self.slices.iter().map(|s| s.ncols()).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.slices[0].nrows()
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, k: usize) -> &Array2<f64> {
        &self.slices[k]
    }

    pub fn slices(&self) -> &[Array2<f64>] {
        &self.slices
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut Array2<f64> {
        &mut self.slices[k]
    }

    pub fn is_ragged(&self) -> bool {
        self.dims().uniform_j().is_none()
    }

    fn check_congruent(&self, other_dims: &DimSpec, what: &str) -> Result<()> {
        if self.dims() != *other_dims {
            return Err(Error::ShapeMismatch(format!(
                "{} not congruent: {:?} vs {:?}",
                what,
                self.dims(),
                other_dims
            )));
        }
        Ok(())
    }

    /// Frobenius norm over all entries, restricted to observed entries when
    /// a mask is given.
    pub fn frobenius_norm(&self, mask: Option<&MaskStack>) -> Result<f64> {
        if let Some(w) = mask {
            self.check_congruent(&w.dims(), "mask")?;
        }
        let mut acc = 0.0;
        for (k, s) in self.slices.iter().enumerate() {
            match mask {
                None => {
                    for v in s.iter() {
                        acc += v * v;
                    }
                }
                Some(w) => {
                    for (v, m) in s.iter().zip(w.slice(k).iter()) {
                        let r = m * v;
                        acc += r * r;
                    }
                }
            }
        }
        Ok(acc.sqrt())
    }

    /// Elementwise `self - xhat`, zeroed wherever the mask is 0.
    pub fn hadamard_residual(
        &self,
        xhat: &SliceStack,
        mask: Option<&MaskStack>,
    ) -> Result<SliceStack> {
        self.check_congruent(&xhat.dims(), "xhat")?;
        if let Some(w) = mask {
            self.check_congruent(&w.dims(), "mask")?;
        }
        let slices = self
            .slices
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut r = s - xhat.slice(k);
                if let Some(w) = mask {
                    r = r * w.slice(k);
                }
                r
            })
            .collect();
        Ok(SliceStack { slices })
    }
}

/// Binary indicator stack congruent to a [`SliceStack`]; 1 = observed.
///
/// No mode-1 fiber (fixed `j`, `k`, varying `i`) may be entirely missing:
/// such a column leaves the corresponding row of `B_k` unidentifiable.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    slices: Vec<Array2<f64>>,
}

impl MaskStack {
    pub fn new(slices: Vec<Array2<f64>>) -> Result<Self> {
        let stack = SliceStack::new(slices)?;
        for (k, s) in stack.slices.iter().enumerate() {
            if s.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidInput(format!(
                    "mask slice {} has entries outside {{0, 1}}",
                    k
                )));
            }
        }
        let mask = MaskStack {
            slices: stack.slices,
        };
        mask.check_fiber_rule()?;
        Ok(mask)
    }

    /// Fully observed mask of the given shape.
    pub fn ones(dims: &DimSpec) -> Result<Self> {
        dims.validate()?;
        Ok(MaskStack {
            slices: dims.j.iter().map(|&j| Array2::ones((dims.i, j))).collect(),
        })
    }

    fn check_fiber_rule(&self) -> Result<()> {
        for (k, s) in self.slices.iter().enumerate() {
            for j in 0..s.ncols() {
                if s.column(j).iter().all(|&v| v == 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "mode-1 fiber (:, {}, {}) is entirely missing",
                        j, k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> DimSpec {
        DimSpec {
            i: self.slices[0].nrows(),
            k: self.slices.len(),
            j: self.slices.iter().map(|s| s.ncols()).collect(),
        }
    }

    pub fn slice(&self, k: usize) -> &Array2<f64> {
        &self.slices[k]
    }

    pub fn slices(&self) -> &[Array2<f64>] {
        &self.slices
    }

    pub fn n_missing(&self) -> usize {
        self.slices
            .iter()
            .map(|s| s.iter().filter(|&&v| v == 0.0).count())
            .sum()
    }

    pub fn n_observed(&self) -> usize {
        self.dims().n_entries() - self.n_missing()
    }

    pub fn is_all_ones(&self) -> bool {
        self.n_missing() == 0
    }
}
