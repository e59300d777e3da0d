//! PARAFAC2 and temporally regularized PARAFAC2 tensor factorization.
//!
//! The crate fits `X_k ~ A D_k B_k^T` under the constant cross-product
//! constraint on the evolving factors, via AO-ADMM with optional temporal
//! smoothness, ridge penalties, and non-negative strengths. Missing entries
//! are handled either by EM imputation or by row-wise masked updates. A
//! direct-fitting ALS baseline, a synthetic evolving-pattern generator, a
//! factor-match-score harness, and a binary bundle format round out the
//! toolkit.

pub mod als;
pub mod aoadmm;
pub mod bundle;
pub mod config;
pub mod em;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod rowwise;
pub mod stack;
pub mod synth;
#[cfg(test)]
pub(crate) mod testkit;

pub use als::{fit_als, AlsConfig};
pub use aoadmm::{fit, AdmmState, ExitReason, FitReport, Init};
pub use config::SolverConfig;
pub use em::fit_em;
pub use error::{Error, Result};
pub use eval::{best_run, detect_degenerate, fms, FmsReport};
pub use model::{check_constraint, loss, ConstraintReport, Parafac2Factors};
pub use rowwise::{fit_rw, RwState};
pub use stack::{DimSpec, MaskStack, SliceStack};
pub use synth::{add_noise, generate, generate_parafac2_feasible, make_mask, ConceptSpec, MaskKind};
