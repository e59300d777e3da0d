//! Solver hyperparameters and tolerances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_nonneg_c() -> bool {
    true
}
fn default_eps_abs() -> f64 {
    1e-10
}
fn default_eps_rel() -> f64 {
    1e-8
}
fn default_eps_feas() -> f64 {
    1e-5
}
fn default_inner_tol() -> f64 {
    1e-5
}
fn default_max_outer() -> usize {
    10_000
}
fn default_max_inner() -> usize {
    5
}

/// Configuration of the AO-ADMM solver family.
///
/// `lambda_b > 0` adds the temporal-smoothness penalty on the evolving
/// factors (requires a uniform second mode); `lambda_a` / `lambda_d` are
/// ridge weights on the static and strength factors. Non-negativity on the
/// third mode is on by default to fix the sign ambiguity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(rename = "R")]
    pub rank: usize,
    #[serde(rename = "lambda_A", default)]
    pub lambda_a: f64,
    #[serde(rename = "lambda_B", default)]
    pub lambda_b: f64,
    #[serde(rename = "lambda_D", default)]
    pub lambda_d: f64,
    #[serde(rename = "nonneg_C", default = "default_nonneg_c")]
    pub nonneg_c: bool,
    #[serde(default = "default_eps_abs")]
    pub eps_abs: f64,
    #[serde(default = "default_eps_rel")]
    pub eps_rel: f64,
    #[serde(default = "default_eps_feas")]
    pub eps_feas: f64,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_max_inner")]
    pub max_inner: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(rank: usize) -> Self {
        SolverConfig {
            rank,
            lambda_a: 0.0,
            lambda_b: 0.0,
            lambda_d: 0.0,
            nonneg_c: default_nonneg_c(),
            eps_abs: default_eps_abs(),
            eps_rel: default_eps_rel(),
            eps_feas: default_eps_feas(),
            inner_tol: default_inner_tol(),
            max_outer: default_max_outer(),
            max_inner: default_max_inner(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("R must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda_A", self.lambda_a),
            ("lambda_B", self.lambda_b),
            ("lambda_D", self.lambda_d),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{} must be finite and >= 0, got {}",
                    name, v
                )));
            }
        }
        for (name, v) in [
            ("eps_abs", self.eps_abs),
            ("eps_rel", self.eps_rel),
            ("eps_feas", self.eps_feas),
            ("inner_tol", self.inner_tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{} must be finite and > 0, got {}",
                    name, v
                )));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidConfig("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}
