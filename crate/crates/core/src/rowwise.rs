//! Row-wise solver for incomplete data: the model is fitted to observed
//! entries only, with each factor row solving its own masked normal
//! equations. Auxiliary, projection, and dual updates are shared with the
//! fully observed solver; only the fidelity-carrying primal solves change.
//!
//! The static mode becomes an ADMM block here (auxiliary `Z_A`, dual
//! `mu_A`), with the ridge applied through the auxiliary proximal step.

use ndarray::{Array1, Array2, Axis};
use std::collections::HashMap;
use std::time::Instant;

use crate::aoadmm::{
    check_stop, compute_gaps, project_p, solve_z_tridiagonal, AdmmState, ExitReason, FitReport,
    Init,
};
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::linalg::{relative_diff, solve_gram_vec, GramSolver};
use crate::model::{self, check_constraint, Parafac2Factors};
use crate::stack::{MaskStack, SliceStack};

const RHO_FLOOR: f64 = 1e-12;
const PROJECTION_SWEEPS: usize = 10;

/// ADMM state for the row-wise solver: the shared evolving/strength blocks
/// plus the static-mode split.
#[derive(Debug, Clone)]
pub struct RwState {
    pub admm: AdmmState,
    pub z_a: Array2<f64>,
    pub mu_a: Array2<f64>,
    pub rho_a: f64,
}

impl RwState {
    pub fn new(f: &Parafac2Factors) -> Self {
        RwState {
            admm: AdmmState::new(f),
            z_a: f.a.clone(),
            mu_a: Array2::zeros(f.a.raw_dim()),
            rho_a: 1.0,
        }
    }
}

/// Masked static-mode row update:
/// `A(i,:) = (sum_k (W_k(i,:) .* X_k(i,:)) B_k D_k + (rho_A/2)(Z_A - mu_A)(i,:))
///           (sum_k D_k B_k^T diag(W_k(i,:)) B_k D_k + (rho_A/2) I)^{-1}`.
pub fn update_a_row(
    i: usize,
    x: &SliceStack,
    w: &MaskStack,
    f: &Parafac2Factors,
    state: &RwState,
) -> Result<Array1<f64>> {
    let r = f.rank();
    let rho = state.rho_a;
    let mut gram = Array2::<f64>::eye(r) * (rho / 2.0);
    let mut rhs = (&state.z_a.row(i) - &state.mu_a.row(i)) * (rho / 2.0);
    for k in 0..x.n_slices() {
        let bd = model::scale_columns(&f.b[k], f.c.row(k));
        let wrow = w.slice(k).row(i);
        let bd_masked = &bd * &wrow.insert_axis(Axis(1));
        gram = gram + bd_masked.t().dot(&bd);
        let xrow = &x.slice(k).row(i) * &w.slice(k).row(i);
        rhs = rhs + xrow.dot(&bd);
    }
    solve_gram_vec(&gram, &rhs)
}

/// Masked evolving-mode row update:
/// `B_k(j,:) = ((W_k(:,j) .* X_k(:,j))^T A D_k + (rho/2)(Z - mu_Z + Y - mu_D)(j,:))
///            (D_k A^T diag(W_k(:,j)) A D_k + rho I)^{-1}`.
pub fn update_bk_row(
    j: usize,
    k: usize,
    x: &SliceStack,
    w: &MaskStack,
    f: &Parafac2Factors,
    state: &RwState,
) -> Result<Array1<f64>> {
    let r = f.rank();
    let rho = state.admm.rho_b[k];
    let ad = model::scale_columns(&f.a, f.c.row(k));
    let wcol = w.slice(k).column(j);
    let ad_masked = &ad * &wcol.insert_axis(Axis(1));
    let mut gram = ad_masked.t().dot(&ad);
    for p in 0..r {
        gram[(p, p)] += rho;
    }
    let xcol = &x.slice(k).column(j) * &w.slice(k).column(j);
    let prior = (&state.admm.z_b[k].row(j) - &state.admm.mu_z_b[k].row(j)
        + &state.admm.y_b[k].row(j)
        - &state.admm.mu_delta_b[k].row(j))
        * (rho / 2.0);
    let rhs = xcol.dot(&ad) + prior;
    solve_gram_vec(&gram, &rhs)
}

/// Masked strength-mode row update:
/// `C(k,:) = (sum_{(i,j) observed} (A(i,:)^T A(i,:) .* B_k(j,:)^T B_k(j,:))
///            + (lambda_d + rho/2) I)^{-1}
///           (diag(A^T (W_k .* X_k) B_k) + (rho/2)(Z_D - mu_D)(k,:))`.
pub fn update_c_row(
    k: usize,
    x: &SliceStack,
    w: &MaskStack,
    f: &Parafac2Factors,
    state: &RwState,
    lambda_d: f64,
) -> Result<Array1<f64>> {
    update_c_row_raw(k, x.slice(k), w.slice(k), f, state, lambda_d)
}

fn update_c_row_raw(
    k: usize,
    x_k: &Array2<f64>,
    w_k: &Array2<f64>,
    f: &Parafac2Factors,
    state: &RwState,
    lambda_d: f64,
) -> Result<Array1<f64>> {
    let r = f.rank();
    let rho = state.admm.rho_d[k];
    let mut gram = Array2::<f64>::zeros((r, r));
    for i in 0..x_k.nrows() {
        for j in 0..x_k.ncols() {
            if w_k[(i, j)] == 0.0 {
                continue;
            }
            for p in 0..r {
                for q in 0..r {
                    gram[(p, q)] += f.a[(i, p)] * f.a[(i, q)] * f.b[k][(j, p)] * f.b[k][(j, q)];
                }
            }
        }
    }
    for p in 0..r {
        gram[(p, p)] += lambda_d + rho / 2.0;
    }
    let xm = x_k * w_k;
    let xb = xm.dot(&f.b[k]);
    let diag_axb = (&f.a * &xb).sum_axis(Axis(0));
    let rhs = diag_axb + (&state.admm.z_d.row(k) - &state.admm.mu_d.row(k)) * (rho / 2.0);
    solve_gram_vec(&gram, &rhs)
}

/// Precomputed mask structure: groups of identical mask columns per slice
/// (shared Gram within a group), groups of identical concatenated mask rows,
/// and the cheaper of the observed/missing index sets per slice.
struct MaskIndex {
    /// Per slice: (representative column, column indices, fully observed).
    col_groups: Vec<Vec<(usize, Vec<usize>, bool)>>,
    /// (representative row, row indices, fully observed across all slices).
    row_groups: Vec<(usize, Vec<usize>, bool)>,
    /// Per slice: observed pairs if fewer, else the missing complement.
    c_sets: Vec<CSet>,
}

enum CSet {
    Observed(Vec<(usize, usize)>),
    Missing(Vec<(usize, usize)>),
}

fn pack_bits<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u64> {
    let mut out = Vec::new();
    let mut word = 0u64;
    let mut used = 0;
    for v in values {
        word = (word << 1) | (*v != 0.0) as u64;
        used += 1;
        if used == 64 {
            out.push(word);
            word = 0;
            used = 0;
        }
    }
    if used > 0 {
        out.push(word);
    }
    out
}

impl MaskIndex {
    fn build(w: &MaskStack) -> Self {
        let dims = w.dims();
        let mut col_groups = Vec::with_capacity(dims.k);
        for k in 0..dims.k {
            let wk = w.slice(k);
            let mut map: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
            for j in 0..wk.ncols() {
                map.entry(pack_bits(wk.column(j).iter()))
                    .or_default()
                    .push(j);
            }
            let groups = map
                .into_values()
                .map(|js| {
                    let rep = js[0];
                    let full = wk.column(rep).iter().all(|&v| v == 1.0);
                    (rep, js, full)
                })
                .collect();
            col_groups.push(groups);
        }

        let mut row_map: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        for i in 0..dims.i {
            let key = pack_bits((0..dims.k).flat_map(|k| w.slice(k).row(i).into_iter()));
            row_map.entry(key).or_default().push(i);
        }
        let row_groups = row_map
            .into_values()
            .map(|is| {
                let rep = is[0];
                let full =
                    (0..dims.k).all(|k| w.slice(k).row(rep).iter().all(|&v| v == 1.0));
                (rep, is, full)
            })
            .collect();

        let mut c_sets = Vec::with_capacity(dims.k);
        for k in 0..dims.k {
            let wk = w.slice(k);
            let mut observed = Vec::new();
            let mut missing = Vec::new();
            for i in 0..wk.nrows() {
                for j in 0..wk.ncols() {
                    if wk[(i, j)] == 0.0 {
                        missing.push((i, j));
                    } else {
                        observed.push((i, j));
                    }
                }
            }
            c_sets.push(if observed.len() <= missing.len() {
                CSet::Observed(observed)
            } else {
                CSet::Missing(missing)
            });
        }
        MaskIndex {
            col_groups,
            row_groups,
            c_sets,
        }
    }
}

struct RwEngine<'a> {
    cfg: &'a SolverConfig,
    f: Parafac2Factors,
    state: RwState,
    /// `W_k .* X_k`, fixed for the whole fit.
    xm: Vec<Array2<f64>>,
    index: MaskIndex,
}

impl<'a> RwEngine<'a> {
    fn new(cfg: &'a SolverConfig, f: Parafac2Factors, x: &SliceStack, w: &MaskStack) -> Self {
        let xm = x
            .slices()
            .iter()
            .zip(w.slices().iter())
            .map(|(xs, ws)| xs * ws)
            .collect();
        let state = RwState::new(&f);
        RwEngine {
            cfg,
            f,
            state,
            xm,
            index: MaskIndex::build(w),
        }
    }

    fn outer_pass(&mut self, w: &MaskStack) -> Result<()> {
        self.mode2_rowwise(w)?;
        self.mode3_rowwise()?;
        self.mode1_rowwise(w)?;
        Ok(())
    }

    fn mode2_rowwise(&mut self, w: &MaskStack) -> Result<()> {
        let k_len = self.f.b.len();
        let r = self.cfg.rank;
        let ata = self.f.a.t().dot(&self.f.a);
        // Masked normal matrices depend only on the static factor, the
        // strengths, and the mask: factor one solver per column group per
        // outer pass and reuse it across inner iterations.
        let mut group_solvers: Vec<Vec<GramSolver>> = Vec::with_capacity(k_len);
        let mut rhs_fid: Vec<Array2<f64>> = Vec::with_capacity(k_len);
        for k in 0..k_len {
            // Same curvature-dominating step size as the fully observed
            // solver (the unmasked Gram bounds every masked row Gram).
            let d = self.f.c.row(k);
            let gram = Array2::from_shape_fn((r, r), |(p, q)| d[p] * ata[(p, q)] * d[q]);
            let rho = (crate::linalg::lambda_max_sym(&gram) + 0.5 * self.cfg.lambda_b)
                .max(RHO_FLOOR);
            self.state.admm.rho_b[k] = rho;

            let ad = model::scale_columns(&self.f.a, self.f.c.row(k));
            let solvers = self.index.col_groups[k]
                .iter()
                .map(|(rep, _js, full)| {
                    let mut g = if *full {
                        ad.t().dot(&ad)
                    } else {
                        crate::linalg::weighted_row_gram(&ad, w.slice(k).column(*rep))
                    };
                    for p in 0..r {
                        g[(p, p)] += rho;
                    }
                    GramSolver::new(g)
                })
                .collect();
            group_solvers.push(solvers);
            rhs_fid.push(self.xm[k].t().dot(&ad));
        }

        for _ in 0..self.cfg.max_inner {
            let b_prev = std::mem::take(&mut self.f.b);
            let z_prev = self.state.admm.z_b.clone();
            let y_prev = self.state.admm.y_b.clone();

            let mut b_all = Vec::with_capacity(k_len);
            for k in 0..k_len {
                let rho = self.state.admm.rho_b[k];
                let prior = (&self.state.admm.z_b[k] - &self.state.admm.mu_z_b[k]
                    + &self.state.admm.y_b[k]
                    - &self.state.admm.mu_delta_b[k])
                    * (rho / 2.0);
                let mut b_next = &rhs_fid[k] + &prior;
                for ((_rep, js, _full), solver) in self.index.col_groups[k]
                    .iter()
                    .zip(group_solvers[k].iter())
                {
                    let mut rows = Array2::<f64>::zeros((js.len(), r));
                    for (at, &j) in js.iter().enumerate() {
                        rows.row_mut(at).assign(&b_next.row(j));
                    }
                    solver.solve_rows_in_place(&mut rows)?;
                    for (at, &j) in js.iter().enumerate() {
                        b_next.row_mut(j).assign(&rows.row(at));
                    }
                }
                b_all.push(b_next);
            }
            self.f.b = b_all;

            self.state.admm.z_b = solve_z_tridiagonal(
                &self.f.b,
                &self.state.admm.mu_z_b,
                &self.state.admm.rho_b,
                self.cfg.lambda_b,
            )?;
            let (y, p, delta) = project_p(
                &self.f.b,
                &self.state.admm.mu_delta_b,
                &self.state.admm.rho_b,
                self.state.admm.delta_b.as_ref(),
                PROJECTION_SWEEPS,
                self.cfg.inner_tol,
            )?;
            self.state.admm.y_b = y;
            self.state.admm.p = p;
            self.state.admm.delta_b = Some(delta);
            for k in 0..k_len {
                self.state.admm.mu_z_b[k] =
                    &self.f.b[k] - &self.state.admm.z_b[k] + &self.state.admm.mu_z_b[k];
                self.state.admm.mu_delta_b[k] =
                    &self.f.b[k] - &self.state.admm.y_b[k] + &self.state.admm.mu_delta_b[k];
            }

            let primal = max_rel_change(&self.f.b, &b_prev);
            let aux = max_rel_change(&self.state.admm.z_b, &z_prev)
                .max(max_rel_change(&self.state.admm.y_b, &y_prev));
            if primal < self.cfg.inner_tol && aux < self.cfg.inner_tol {
                break;
            }
        }
        Ok(())
    }

    fn mode3_rowwise(&mut self) -> Result<()> {
        let r = self.cfg.rank;
        let k_len = self.f.b.len();
        let ata = self.f.a.t().dot(&self.f.a);
        let mut solvers = Vec::with_capacity(k_len);
        let mut rhs_fid = Vec::with_capacity(k_len);
        for k in 0..k_len {
            let bgram = self.f.b_gram(k);
            let tr: f64 = (0..r).map(|p| ata[(p, p)] * bgram[(p, p)]).sum();
            let rho = (tr / r as f64).max(RHO_FLOOR);
            self.state.admm.rho_d[k] = rho;
            let mut gram = self.masked_strength_gram(k, &ata);
            for p in 0..r {
                gram[(p, p)] += self.cfg.lambda_d + rho / 2.0;
            }
            solvers.push(GramSolver::new(gram));
            let xb = self.xm[k].dot(&self.f.b[k]);
            rhs_fid.push((&self.f.a * &xb).sum_axis(Axis(0)));
        }

        for _ in 0..self.cfg.max_inner {
            let c_prev = self.f.c.clone();
            let z_prev = self.state.admm.z_d.clone();
            for k in 0..k_len {
                let rho = self.state.admm.rho_d[k];
                let rhs = &rhs_fid[k]
                    + &((&self.state.admm.z_d.row(k) - &self.state.admm.mu_d.row(k))
                        * (rho / 2.0));
                let mut rows = rhs.into_shape_with_order((1, r)).expect("row");
                solvers[k].solve_rows_in_place(&mut rows)?;
                let d = rows.row(0);

                let mut z = &d + &self.state.admm.mu_d.row(k);
                if self.cfg.nonneg_c {
                    z.map_inplace(|v| *v = v.max(0.0));
                }
                let mu_next = &d - &z + &self.state.admm.mu_d.row(k);
                self.f.c.row_mut(k).assign(&d);
                self.state.admm.z_d.row_mut(k).assign(&z);
                self.state.admm.mu_d.row_mut(k).assign(&mu_next);
            }
            let primal = relative_diff(&self.f.c, &c_prev);
            let aux = relative_diff(&self.state.admm.z_d, &z_prev);
            if primal < self.cfg.inner_tol && aux < self.cfg.inner_tol {
                break;
            }
        }
        Ok(())
    }

    /// `sum over observed (i,j) of (a_i a_i^T) .* (b_j b_j^T)`, assembled
    /// from whichever of the observed/missing sets is smaller.
    fn masked_strength_gram(&self, k: usize, ata: &Array2<f64>) -> Array2<f64> {
        let r = self.cfg.rank;
        let accumulate = |pairs: &[(usize, usize)]| -> Array2<f64> {
            let mut g = Array2::<f64>::zeros((r, r));
            for &(i, j) in pairs {
                for p in 0..r {
                    for q in 0..r {
                        g[(p, q)] +=
                            self.f.a[(i, p)] * self.f.a[(i, q)] * self.f.b[k][(j, p)]
                                * self.f.b[k][(j, q)];
                    }
                }
            }
            g
        };
        match &self.index.c_sets[k] {
            CSet::Observed(pairs) => accumulate(pairs),
            CSet::Missing(pairs) => {
                let full = ata * &self.f.b_gram(k);
                full - accumulate(pairs)
            }
        }
    }

    fn mode1_rowwise(&mut self, w: &MaskStack) -> Result<()> {
        let r = self.cfg.rank;
        let k_len = self.f.b.len();
        let bd: Vec<Array2<f64>> = (0..k_len)
            .map(|k| model::scale_columns(&self.f.b[k], self.f.c.row(k)))
            .collect();
        let bd_grams: Vec<Array2<f64>> = bd.iter().map(|m| m.t().dot(m)).collect();
        let tr: f64 = bd_grams
            .iter()
            .map(|g| (0..r).map(|p| g[(p, p)]).sum::<f64>())
            .sum();
        self.state.rho_a = (tr / r as f64).max(RHO_FLOOR);
        let rho = self.state.rho_a;

        // Fidelity right-hand side and per-row-group solvers, fixed across
        // the inner loop.
        let mut rhs_fid = Array2::<f64>::zeros(self.f.a.raw_dim());
        for k in 0..k_len {
            rhs_fid = rhs_fid + self.xm[k].dot(&bd[k]);
        }
        let solvers: Vec<GramSolver> = self
            .index
            .row_groups
            .iter()
            .map(|(rep, _is, full)| {
                let mut gram = Array2::<f64>::eye(r) * (rho / 2.0);
                if *full {
                    for g in &bd_grams {
                        gram = gram + g;
                    }
                } else {
                    for k in 0..k_len {
                        let wrow = w.slice(k).row(*rep);
                        if wrow.iter().all(|&v| v == 1.0) {
                            gram = gram + &bd_grams[k];
                        } else {
                            gram = gram + crate::linalg::weighted_row_gram(&bd[k], wrow);
                        }
                    }
                }
                GramSolver::new(gram)
            })
            .collect();

        for _ in 0..self.cfg.max_inner {
            let a_prev = std::mem::replace(&mut self.f.a, Array2::zeros((0, 0)));
            let z_prev = self.state.z_a.clone();

            let prior = (&self.state.z_a - &self.state.mu_a) * (rho / 2.0);
            let mut a_next = &rhs_fid + &prior;
            for ((_rep, is, _full), solver) in self.index.row_groups.iter().zip(solvers.iter()) {
                let mut rows = Array2::<f64>::zeros((is.len(), r));
                for (at, &i) in is.iter().enumerate() {
                    rows.row_mut(at).assign(&a_next.row(i));
                }
                solver.solve_rows_in_place(&mut rows)?;
                for (at, &i) in is.iter().enumerate() {
                    a_next.row_mut(i).assign(&rows.row(at));
                }
            }
            self.f.a = a_next;

            // Ridge enters through the auxiliary proximal step.
            let scale = rho / (2.0 * self.cfg.lambda_a + rho);
            self.state.z_a = (&self.f.a + &self.state.mu_a) * scale;
            self.state.mu_a = &self.f.a - &self.state.z_a + &self.state.mu_a;

            let primal = relative_diff(&self.f.a, &a_prev);
            let aux = relative_diff(&self.state.z_a, &z_prev);
            if primal < self.cfg.inner_tol && aux < self.cfg.inner_tol {
                break;
            }
        }
        Ok(())
    }

    fn gaps(&self) -> crate::model::FeasibilityGaps {
        let mut gaps = compute_gaps(&self.f, &self.state.admm);
        gaps.a = Some(relative_diff(&self.state.z_a, &self.f.a));
        gaps
    }

    fn feasible_factors(&self) -> Parafac2Factors {
        Parafac2Factors {
            a: self.f.a.clone(),
            b: self.state.admm.y_b.clone(),
            c: self.state.admm.z_d.clone(),
        }
    }
}

fn max_rel_change(curr: &[Array2<f64>], prev: &[Array2<f64>]) -> f64 {
    curr.iter()
        .zip(prev.iter())
        .map(|(c, p)| relative_diff(c, p))
        .fold(0.0, f64::max)
}

/// Fits the masked objective with row-wise primal updates.
pub fn fit_rw(
    x: &SliceStack,
    w: &MaskStack,
    cfg: &SolverConfig,
    init: &Init,
) -> Result<(Parafac2Factors, FitReport)> {
    crate::aoadmm::validate_problem(x, cfg)?;
    if x.dims() != w.dims() {
        return Err(Error::ShapeMismatch("mask vs data".into()));
    }
    let f0 = init.resolve(&x.dims(), cfg.rank)?;
    let started = Instant::now();

    let mut engine = RwEngine::new(cfg, f0, x, w);
    let mut trace = vec![model::loss(&engine.f, x, cfg, Some(w))?];
    let mut aux_trace = vec![model::loss(&engine.feasible_factors(), x, cfg, Some(w))?];
    let mut exit_reason = ExitReason::MaxIter;

    for n in 1..=cfg.max_outer {
        engine.outer_pass(w)?;
        let f_n = model::loss(&engine.f, x, cfg, Some(w))?;
        if !f_n.is_finite() {
            return Err(Error::NumericalFailure("objective diverged".into()));
        }
        if f_n > trace[n - 1] + 1e-6 * trace[0] {
            log::warn!(
                "masked objective increased at outer iteration {}: {} -> {}",
                n,
                trace[n - 1],
                f_n
            );
        }
        trace.push(f_n);
        aux_trace.push(model::loss(&engine.feasible_factors(), x, cfg, Some(w))?);
        let gaps = engine.gaps();
        if let Some(reason) = check_stop(trace[n - 1], f_n, &gaps, cfg) {
            exit_reason = reason;
            break;
        }
    }

    let gaps = engine.gaps();
    let feasible = gaps.all_below(cfg.eps_feas);
    let out = engine.feasible_factors();
    let mut constraint = check_constraint(&out);
    constraint.feasibility_gaps = Some(gaps);
    let n_outer = trace.len() - 1;
    Ok((
        out,
        FitReport {
            loss_trace: trace,
            aux_loss_trace: aux_trace,
            n_outer,
            exit_reason,
            feasible,
            constraint,
            wall_time: started.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoadmm::{fit, update_bk_primal};
    use crate::stack::DimSpec;
    use crate::synth::{self, MaskKind};
    use crate::testkit;

    fn setup(seed: u64) -> (SliceStack, MaskStack, Parafac2Factors, RwState) {
        let dims = DimSpec::uniform(6, 4, 3).unwrap();
        let truth = testkit::random_factors(6, vec![4, 4, 4], 2, seed);
        let x = truth.reconstruct();
        let w = synth::make_mask(&dims, MaskKind::Random, 0.4, seed).unwrap();
        let f = testkit::random_factors(6, vec![4, 4, 4], 2, seed + 50);
        let mut state = RwState::new(&f);
        state.rho_a = 0.9;
        state.admm.rho_b = vec![0.7, 1.1, 1.3];
        state.admm.rho_d = vec![0.6, 1.2, 0.8];
        state.z_a = testkit::random_matrix(6, 2, seed + 60);
        state.mu_a = testkit::random_matrix(6, 2, seed + 61);
        (x, w, f, state)
    }

    #[test]
    fn a_row_with_full_mask_matches_full_matrix_stationarity() {
        let (x, _w, f, state) = setup(1);
        let ones = MaskStack::ones(&x.dims()).unwrap();
        // Full-matrix counterpart with the same rho and prior terms:
        // A = (sum X B D + (rho/2)(Z_A - mu_A)) (sum D B^T B D + (rho/2) I)^{-1}.
        let r = 2;
        let mut gram = Array2::<f64>::eye(r) * (state.rho_a / 2.0);
        let mut rhs = (&state.z_a - &state.mu_a) * (state.rho_a / 2.0);
        for k in 0..3 {
            let bd = &f.b[k] * &f.c.row(k);
            gram = gram + bd.t().dot(&bd);
            rhs = rhs + x.slice(k).dot(&bd);
        }
        for i in 0..6 {
            let row = update_a_row(i, &x, &ones, &f, &state).unwrap();
            let oracle = testkit::gauss_solve(&gram, &rhs.row(i).to_owned());
            for p in 0..r {
                assert!((row[p] - oracle[p]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn a_row_with_empty_row_returns_prior() {
        let (x, _w, f, state) = setup(2);
        // Row 3 fully missing in every slice; allowed, only mode-1 fibers
        // are protected.
        let dims = x.dims();
        let slices: Vec<Array2<f64>> = (0..dims.k)
            .map(|_| {
                let mut m = Array2::ones((dims.i, 4));
                m.row_mut(3).fill(0.0);
                m
            })
            .collect();
        let w = MaskStack::new(slices).unwrap();
        let row = update_a_row(3, &x, &w, &f, &state).unwrap();
        let expect = &state.z_a.row(3) - &state.mu_a.row(3);
        for p in 0..2 {
            assert!((row[p] - expect[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn a_row_matches_masked_dense_oracle() {
        let (x, w, f, state) = setup(3);
        let r = 2;
        for i in 0..6 {
            let row = update_a_row(i, &x, &w, &f, &state).unwrap();
            let mut gram = Array2::<f64>::eye(r) * (state.rho_a / 2.0);
            let mut rhs = ((&state.z_a.row(i) - &state.mu_a.row(i)) * (state.rho_a / 2.0))
                .to_owned();
            for k in 0..3 {
                let bd = &f.b[k] * &f.c.row(k);
                for j in 0..4 {
                    if w.slice(k)[(i, j)] == 0.0 {
                        continue;
                    }
                    for p in 0..r {
                        for q in 0..r {
                            gram[(p, q)] += bd[(j, p)] * bd[(j, q)];
                        }
                        rhs[p] += x.slice(k)[(i, j)] * bd[(j, p)];
                    }
                }
            }
            let oracle = testkit::gauss_solve(&gram, &rhs);
            for p in 0..r {
                assert!((row[p] - oracle[p]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn b_row_with_full_mask_reduces_to_full_matrix_update() {
        let (x, _w, f, state) = setup(4);
        let ones = MaskStack::ones(&x.dims()).unwrap();
        for k in 0..3 {
            let full = update_bk_primal(x.slice(k), &f.a, f.c.row(k), &state.admm, k).unwrap();
            for j in 0..4 {
                let row = update_bk_row(j, k, &x, &ones, &f, &state).unwrap();
                for p in 0..2 {
                    assert!((row[p] - full[(j, p)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn b_row_with_zero_static_factor_averages_priors() {
        let (x, w, mut f, state) = setup(5);
        f.a.fill(0.0);
        let row = update_bk_row(1, 0, &x, &w, &f, &state).unwrap();
        let expect = (&state.admm.z_b[0].row(1) - &state.admm.mu_z_b[0].row(1)
            + &state.admm.y_b[0].row(1)
            - &state.admm.mu_delta_b[0].row(1))
            / 2.0;
        for p in 0..2 {
            assert!((row[p] - expect[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn b_row_matches_masked_dense_oracle() {
        let (x, w, f, state) = setup(6);
        let r = 2;
        for k in 0..3 {
            let rho = state.admm.rho_b[k];
            for j in 0..4 {
                let row = update_bk_row(j, k, &x, &w, &f, &state).unwrap();
                let mut gram = Array2::<f64>::eye(r) * rho;
                let mut rhs = ((&state.admm.z_b[k].row(j) - &state.admm.mu_z_b[k].row(j)
                    + &state.admm.y_b[k].row(j)
                    - &state.admm.mu_delta_b[k].row(j))
                    * (rho / 2.0))
                    .to_owned();
                for i in 0..6 {
                    if w.slice(k)[(i, j)] == 0.0 {
                        continue;
                    }
                    for p in 0..r {
                        let adp = f.a[(i, p)] * f.c[(k, p)];
                        for q in 0..r {
                            let adq = f.a[(i, q)] * f.c[(k, q)];
                            gram[(p, q)] += adp * adq;
                        }
                        rhs[p] += x.slice(k)[(i, j)] * adp;
                    }
                }
                let oracle = testkit::gauss_solve(&gram, &rhs);
                for p in 0..r {
                    assert!((row[p] - oracle[p]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn c_row_with_full_mask_reduces_to_admm_primal() {
        let (x, _w, f, state) = setup(7);
        let ones = MaskStack::ones(&x.dims()).unwrap();
        let lambda_d = 0.4;
        for k in 0..3 {
            let row = update_c_row(k, &x, &ones, &f, &state, lambda_d).unwrap();
            // The fully observed primal solve from the strength-mode ADMM.
            let rho = state.admm.rho_d[k];
            let ata = f.a.t().dot(&f.a);
            let bgram = f.b_gram(k);
            let mut gram = &ata * &bgram;
            for p in 0..2 {
                gram[(p, p)] += lambda_d + rho / 2.0;
            }
            let xb = x.slice(k).dot(&f.b[k]);
            let diag_axb = (&f.a * &xb).sum_axis(Axis(0));
            let rhs = diag_axb
                + (&state.admm.z_d.row(k) - &state.admm.mu_d.row(k)) * (rho / 2.0);
            let oracle = testkit::gauss_solve(&gram, &rhs);
            for p in 0..2 {
                assert!((row[p] - oracle[p]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn c_row_with_empty_slice_is_prior_dominated() {
        let (x, _w, f, mut state) = setup(8);
        state.admm.mu_d.fill(0.0);
        let lambda_d = 0.5;
        let rho = state.admm.rho_d[0];
        let w_empty = Array2::<f64>::zeros((6, 4));
        let row = update_c_row_raw(0, x.slice(0), &w_empty, &f, &state, lambda_d).unwrap();
        let expect = &state.admm.z_d.row(0) * (rho / (2.0 * lambda_d + rho));
        for p in 0..2 {
            assert!((row[p] - expect[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn c_row_matches_observed_pair_loop_oracle() {
        let (x, w, f, state) = setup(9);
        let lambda_d = 0.2;
        let r = 2;
        for k in 0..3 {
            let row = update_c_row(k, &x, &w, &f, &state, lambda_d).unwrap();
            let rho = state.admm.rho_d[k];
            let mut gram = Array2::<f64>::zeros((r, r));
            let mut diag = ndarray::Array1::<f64>::zeros(r);
            for i in 0..6 {
                for j in 0..4 {
                    if w.slice(k)[(i, j)] == 0.0 {
                        continue;
                    }
                    for p in 0..r {
                        for q in 0..r {
                            gram[(p, q)] +=
                                f.a[(i, p)] * f.a[(i, q)] * f.b[k][(j, p)] * f.b[k][(j, q)];
                        }
                        diag[p] += f.a[(i, p)] * x.slice(k)[(i, j)] * f.b[k][(j, p)];
                    }
                }
            }
            for p in 0..r {
                gram[(p, p)] += lambda_d + rho / 2.0;
            }
            let rhs = diag + (&state.admm.z_d.row(k) - &state.admm.mu_d.row(k)) * (rho / 2.0);
            let oracle = testkit::gauss_solve(&gram, &rhs);
            for p in 0..r {
                assert!((row[p] - oracle[p]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_mask_fit_matches_plain_fit_loss() {
        // Noise keeps the loss floor well away from zero so "same final
        // loss" is a meaningful comparison between the two solvers.
        let dims = DimSpec::uniform(10, 6, 4).unwrap();
        let (clean, _t) = synth::generate_parafac2_feasible(&dims, 2, 11).unwrap();
        let x = synth::add_noise(&clean, 0.5, 7).unwrap();
        let w = MaskStack::ones(&dims).unwrap();
        let mut cfg = SolverConfig::new(2);
        cfg.lambda_a = 1e-6;
        cfg.lambda_d = 1e-6;
        cfg.eps_rel = 1e-9;
        cfg.max_outer = 6000;
        let init = Init::Seed(5);
        let (_fa, ra) = fit(&x, &cfg, &init).unwrap();
        let (_fb, rb) = fit_rw(&x, &w, &cfg, &init).unwrap();
        let (la, lb) = (ra.final_loss(), rb.final_loss());
        assert!(
            (la - lb).abs() <= 1e-6 * la.abs().max(1.0),
            "losses {} vs {}",
            la,
            lb
        );
    }

    #[test]
    fn recovers_truth_under_random_missingness() {
        let dims = DimSpec::uniform(18, 10, 8).unwrap();
        let (x, truth) = synth::generate_parafac2_feasible(&dims, 2, 31).unwrap();
        let w = synth::make_mask(&dims, MaskKind::Random, 0.3, 5).unwrap();
        let mut cfg = SolverConfig::new(2);
        cfg.lambda_a = 1e-8;
        cfg.lambda_d = 1e-8;
        cfg.max_outer = 800;
        let mut best = 0.0f64;
        for seed in 0..8 {
            let (est, report) = fit_rw(&x, &w, &cfg, &Init::Seed(seed)).unwrap();
            if !report.feasible {
                continue;
            }
            best = best.max(crate::eval::fms(&est, &truth).unwrap().total);
            if best >= 0.95 {
                break;
            }
        }
        assert!(best >= 0.95, "best FMS {}", best);
    }
}
