//! Direct-fitting ALS baseline, with optional EM imputation of missing
//! entries.
//!
//! The evolving factors are parametrized as `B_k = P_k B` with orthonormal
//! `P_k` and a shared `R x R` coordinate factor, which encodes the constant
//! cross-product constraint exactly. Each sweep solves the orthogonal
//! Procrustes problems for the `P_k`, projects the slices, and runs one
//! alternating least-squares pass over the remaining factors.

use ndarray::{Array2, Axis};
use std::time::Instant;

use crate::aoadmm::{project_p, ExitReason, FitReport, Init};
use crate::error::{Error, Result};
use crate::linalg::{procrustes, solve_gram, solve_gram_vec};
use crate::model::{self, check_constraint, FeasibilityGaps, Parafac2Factors};
use crate::stack::{MaskStack, SliceStack};

/// Baseline solver configuration; a subset of the main solver's knobs plus
/// projected-least-squares clamps for the modes the baseline can constrain.
#[derive(Debug, Clone)]
pub struct AlsConfig {
    pub rank: usize,
    pub eps_rel: f64,
    pub max_outer: usize,
    pub seed: u64,
    /// Clamp the static factor after each solve.
    pub nonneg_a: bool,
    /// Clamp the strength rows after each solve.
    pub nonneg_c: bool,
}

impl AlsConfig {
    pub fn new(rank: usize) -> Self {
        AlsConfig {
            rank,
            eps_rel: 1e-8,
            max_outer: 10_000,
            seed: 0,
            nonneg_a: false,
            nonneg_c: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("R must be >= 1".into()));
        }
        if !(self.eps_rel > 0.0) {
            return Err(Error::InvalidConfig("eps_rel must be > 0".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidConfig("max_outer must be >= 1".into()));
        }
        Ok(())
    }
}

/// Orthonormal bases and the shared coordinate factor.
#[derive(Debug, Clone)]
pub struct AlsState {
    pub p: Vec<Array2<f64>>,
    pub coord: Array2<f64>,
}

/// Fits PARAFAC2 by direct fitting. With a mask, unobserved entries start
/// at each slice's observed mean and are refreshed from the reconstruction
/// after every sweep; the stopping loss only scores observed entries.
pub fn fit_als(
    x: &SliceStack,
    cfg: &AlsConfig,
    mask: Option<&MaskStack>,
    init: &Init,
) -> Result<(Parafac2Factors, FitReport)> {
    cfg.validate()?;
    let dims = x.dims();
    let min_dim = dims.i.min(*dims.j.iter().min().unwrap());
    if cfg.rank > min_dim {
        return Err(Error::InvalidInput(format!(
            "rank {} exceeds min(I, J_k) = {}",
            cfg.rank, min_dim
        )));
    }
    if let Some(w) = mask {
        if w.dims() != dims {
            return Err(Error::ShapeMismatch("mask vs data".into()));
        }
    }
    let f0 = init.resolve(&dims, cfg.rank)?;
    let started = Instant::now();
    let r = cfg.rank;
    let k_len = dims.k;

    // One Procrustes pass turns the random evolving factors into an
    // orthonormal-times-coordinate parametrization.
    let zero_mu: Vec<Array2<f64>> = f0.b.iter().map(|b| Array2::zeros(b.raw_dim())).collect();
    let (_y, mut p, mut coord) = project_p(&f0.b, &zero_mu, &vec![1.0; k_len], None, 1, 1e-8)?;

    let mut a = f0.a.clone();
    let mut c = f0.c.clone();
    let mut working = x.clone();
    if let Some(w) = mask {
        crate::em::impute_slice_means(&mut working, w)?;
    }

    let loss_cfg = crate::config::SolverConfig::new(r);
    let current_factors = |a: &Array2<f64>, p: &[Array2<f64>], coord: &Array2<f64>, c: &Array2<f64>| {
        Parafac2Factors {
            a: a.clone(),
            b: p.iter().map(|pk| pk.dot(coord)).collect(),
            c: c.clone(),
        }
    };

    let f_init = current_factors(&a, &p, &coord, &c);
    let mut trace = vec![model::loss(&f_init, &working, &loss_cfg, mask)?];
    let mut exit_reason = ExitReason::MaxIter;

    for n in 1..=cfg.max_outer {
        // Orthogonal Procrustes step for every slice basis.
        for k in 0..k_len {
            let ad = model::scale_columns(&a, c.row(k));
            let target = working.slice(k).t().dot(&ad).dot(&coord.t());
            p[k] = procrustes(&target);
        }
        // Project the slices and run one alternating pass on the small
        // problem `V_k ~ A D_k coord^T`.
        let v: Vec<Array2<f64>> = (0..k_len).map(|k| working.slice(k).dot(&p[k])).collect();

        let mut gram = Array2::<f64>::zeros((r, r));
        let mut rhs = Array2::<f64>::zeros((dims.i, r));
        let coord_gram = coord.t().dot(&coord);
        for k in 0..k_len {
            let d = c.row(k);
            let bd = model::scale_columns(&coord, d);
            rhs = rhs + v[k].dot(&bd);
            gram = gram + Array2::from_shape_fn((r, r), |(pp, qq)| {
                d[pp] * coord_gram[(pp, qq)] * d[qq]
            });
        }
        a = solve_gram(&gram, &rhs)?;
        if cfg.nonneg_a {
            a.map_inplace(|val| *val = val.max(0.0));
        }

        let ata = a.t().dot(&a);
        let mut gram_b = Array2::<f64>::zeros((r, r));
        let mut rhs_b = Array2::<f64>::zeros((r, r));
        for k in 0..k_len {
            let d = c.row(k);
            let adk = model::scale_columns(&a, d);
            rhs_b = rhs_b + v[k].t().dot(&adk);
            gram_b = gram_b + Array2::from_shape_fn((r, r), |(pp, qq)| {
                d[pp] * ata[(pp, qq)] * d[qq]
            });
        }
        // rhs_b rows correspond to coordinate rows: coord = rhs_b * gram_b^{-1}.
        coord = solve_gram(&gram_b, &rhs_b)?;

        let coord_gram = coord.t().dot(&coord);
        let strength_gram = &ata * &coord_gram;
        for k in 0..k_len {
            let vc = v[k].dot(&coord);
            let diag = (&a * &vc).sum_axis(Axis(0));
            let mut d = solve_gram_vec(&strength_gram, &diag)?;
            if cfg.nonneg_c {
                d.map_inplace(|val| *val = val.max(0.0));
            }
            c.row_mut(k).assign(&d);
        }

        let f_now = current_factors(&a, &p, &coord, &c);
        if let Some(w) = mask {
            for k in 0..k_len {
                let rec = f_now.reconstruct_slice(k);
                let wk = w.slice(k);
                let xk = working.slice_mut(k);
                for ((val, m), rv) in xk.iter_mut().zip(wk.iter()).zip(rec.iter()) {
                    if *m == 0.0 {
                        *val = *rv;
                    }
                }
            }
        }
        let f_n = model::loss(&f_now, &working, &loss_cfg, mask)?;
        if !f_n.is_finite() {
            return Err(Error::NumericalFailure("objective diverged".into()));
        }
        trace.push(f_n);
        let prev = trace[n - 1];
        if prev == 0.0 {
            if f_n == 0.0 {
                exit_reason = ExitReason::AbsTol;
                break;
            }
        } else if (f_n - prev).abs() / prev.abs() < cfg.eps_rel {
            exit_reason = ExitReason::RelTol;
            break;
        }
    }

    let out = current_factors(&a, &p, &coord, &c);
    let mut constraint = check_constraint(&out);
    // The parametrization satisfies the constraint by construction; there
    // are no auxiliaries to drift from.
    constraint.feasibility_gaps = Some(FeasibilityGaps::default());
    let n_outer = trace.len() - 1;
    Ok((
        out,
        FitReport {
            aux_loss_trace: trace.clone(),
            loss_trace: trace,
            n_outer,
            exit_reason,
            feasible: true,
            constraint,
            wall_time: started.elapsed().as_secs_f64(),
        },
    ))
}
