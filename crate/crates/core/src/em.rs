//! Expectation-maximization handling of missing entries: alternate full
//! outer solver passes on a completed tensor with reconstruction-based
//! imputation of the unobserved entries.

use std::time::Instant;

use crate::aoadmm::{check_stop, Engine, ExitReason, FitReport, Init};
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::model::{self, check_constraint, Parafac2Factors};
use crate::stack::{MaskStack, SliceStack};

/// Replaces unobserved entries with the mean of each slice's observed ones.
pub(crate) fn impute_slice_means(x: &mut SliceStack, w: &MaskStack) -> Result<()> {
    for k in 0..x.n_slices() {
        let wk = w.slice(k);
        let observed = wk.iter().filter(|&&v| v != 0.0).count();
        if observed == 0 {
            return Err(Error::InvalidInput(format!(
                "slice {} has no observed entries; initial imputation undefined",
                k
            )));
        }
        let sum: f64 = x
            .slice(k)
            .iter()
            .zip(wk.iter())
            .map(|(v, m)| m * v)
            .sum();
        let mean = sum / observed as f64;
        let xk = x.slice_mut(k);
        for (v, m) in xk.iter_mut().zip(wk.iter()) {
            if *m == 0.0 {
                *v = mean;
            }
        }
    }
    Ok(())
}

fn validate_mask(x: &SliceStack, w: &MaskStack) -> Result<()> {
    if x.dims() != w.dims() {
        return Err(Error::ShapeMismatch("mask vs data".into()));
    }
    Ok(())
}

/// Fits the model to incomplete data by alternating one outer solver pass
/// on the completed tensor with an imputation step that overwrites only the
/// unobserved entries from the current reconstruction. Stopping is
/// evaluated on the masked objective so the criterion does not chase the
/// imputed values. With a fully observed mask this reproduces the plain
/// fit bit for bit.
pub fn fit_em(
    x: &SliceStack,
    w: &MaskStack,
    cfg: &SolverConfig,
    init: &Init,
) -> Result<(Parafac2Factors, FitReport)> {
    crate::aoadmm::validate_problem(x, cfg)?;
    validate_mask(x, w)?;
    let f0 = init.resolve(&x.dims(), cfg.rank)?;
    let started = Instant::now();

    let mut working = x.clone();
    impute_slice_means(&mut working, w)?;

    let mut engine = Engine::new(cfg, f0);
    let mut trace = vec![model::loss(&engine.f, &working, cfg, Some(w))?];
    let mut aux_trace = vec![model::loss(&engine.feasible_factors(), &working, cfg, Some(w))?];
    let mut exit_reason = ExitReason::MaxIter;

    for n in 1..=cfg.max_outer {
        engine.outer_pass(&working)?;
        // E-step: refresh only the unobserved entries.
        for k in 0..working.n_slices() {
            let rec = engine.f.reconstruct_slice(k);
            let wk = w.slice(k);
            let xk = working.slice_mut(k);
            for ((v, m), r) in xk.iter_mut().zip(wk.iter()).zip(rec.iter()) {
                if *m == 0.0 {
                    *v = *r;
                }
            }
        }
        let f_n = model::loss(&engine.f, &working, cfg, Some(w))?;
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
        aux_trace.push(model::loss(&engine.feasible_factors(), &working, cfg, Some(w))?);
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
    use crate::aoadmm::fit;
    use crate::stack::DimSpec;
    use crate::synth::{self, MaskKind};

    fn small_cfg(rank: usize) -> SolverConfig {
        let mut cfg = SolverConfig::new(rank);
        cfg.lambda_a = 1e-10;
        cfg.lambda_d = 1e-10;
        cfg.max_outer = 600;
        cfg
    }

    #[test]
    fn all_ones_mask_is_bit_identical_to_plain_fit() {
        let dims = DimSpec::uniform(10, 6, 4).unwrap();
        let (x, _t) = synth::generate_parafac2_feasible(&dims, 2, 3).unwrap();
        let w = MaskStack::ones(&dims).unwrap();
        let mut cfg = small_cfg(2);
        cfg.max_outer = 60;
        let init = Init::Seed(9);
        let (fa, ra) = fit(&x, &cfg, &init).unwrap();
        let (fb, rb) = fit_em(&x, &w, &cfg, &init).unwrap();
        assert_eq!(ra.loss_trace, rb.loss_trace);
        assert_eq!(ra.n_outer, rb.n_outer);
        assert_eq!(fa.a, fb.a);
        assert_eq!(fa.c, fb.c);
        for k in 0..4 {
            assert_eq!(fa.b[k], fb.b[k]);
        }
    }

    #[test]
    fn observed_entries_never_change() {
        let dims = DimSpec::uniform(12, 8, 5).unwrap();
        let (clean, _t) = synth::generate_parafac2_feasible(&dims, 2, 5).unwrap();
        let x = synth::add_noise(&clean, 0.5, 17).unwrap();
        let w = synth::make_mask(&dims, MaskKind::Random, 0.25, 17).unwrap();
        let mut cfg = small_cfg(2);
        cfg.max_outer = 30;

        // Re-run the loop manually to inspect the working tensor.
        let mut working = x.clone();
        impute_slice_means(&mut working, &w).unwrap();
        let mut engine = Engine::new(&cfg, Init::Seed(2).resolve(&dims, 2).unwrap());
        for _ in 0..5 {
            engine.outer_pass(&working).unwrap();
            for k in 0..working.n_slices() {
                let rec = engine.f.reconstruct_slice(k);
                let wk = w.slice(k).clone();
                let xk = working.slice_mut(k);
                for ((v, m), r) in xk.iter_mut().zip(wk.iter()).zip(rec.iter()) {
                    if *m == 0.0 {
                        *v = *r;
                    }
                }
            }
            for k in 0..working.n_slices() {
                for i in 0..dims.i {
                    for j in 0..dims.j[k] {
                        if w.slice(k)[(i, j)] == 1.0 {
                            // Bit-exact: observed entries are never touched.
                            assert_eq!(working.slice(k)[(i, j)], x.slice(k)[(i, j)]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn recovers_truth_under_random_missingness() {
        let dims = DimSpec::uniform(20, 12, 8).unwrap();
        let (x, truth) = synth::generate_parafac2_feasible(&dims, 2, 21).unwrap();
        let w = synth::make_mask(&dims, MaskKind::Random, 0.25, 4).unwrap();
        let mut cfg = small_cfg(2);
        cfg.lambda_a = 1e-8;
        cfg.lambda_d = 1e-8;
        cfg.max_outer = 800;
        let mut best = 0.0f64;
        for seed in 0..10 {
            let (est, report) = fit_em(&x, &w, &cfg, &Init::Seed(seed)).unwrap();
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

    #[test]
    fn imputed_entries_match_reconstruction_at_fixed_point() {
        let dims = DimSpec::uniform(10, 6, 4).unwrap();
        let (x, _t) = synth::generate_parafac2_feasible(&dims, 2, 8).unwrap();
        let w = synth::make_mask(&dims, MaskKind::Random, 0.2, 8).unwrap();
        let cfg = small_cfg(2);

        // Replay the EM loop to read off the final working tensor.
        let mut working = x.clone();
        impute_slice_means(&mut working, &w).unwrap();
        let mut engine = Engine::new(&cfg, Init::Seed(3).resolve(&dims, 2).unwrap());
        let mut trace = vec![model::loss(&engine.f, &working, &cfg, Some(&w)).unwrap()];
        for n in 1..=cfg.max_outer {
            engine.outer_pass(&working).unwrap();
            for k in 0..working.n_slices() {
                let rec = engine.f.reconstruct_slice(k);
                let wk = w.slice(k).clone();
                let xk = working.slice_mut(k);
                for ((v, m), r) in xk.iter_mut().zip(wk.iter()).zip(rec.iter()) {
                    if *m == 0.0 {
                        *v = *r;
                    }
                }
            }
            trace.push(model::loss(&engine.f, &working, &cfg, Some(&w)).unwrap());
            let gaps = engine.gaps();
            if check_stop(trace[n - 1], trace[n], &gaps, &cfg).is_some() {
                break;
            }
        }
        // By construction of the E-step the working tensor equals the
        // reconstruction at every unobserved entry.
        for k in 0..working.n_slices() {
            let rec = engine.f.reconstruct_slice(k);
            for i in 0..dims.i {
                for j in 0..dims.j[k] {
                    if w.slice(k)[(i, j)] == 0.0 {
                        assert_eq!(working.slice(k)[(i, j)], rec[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let dims = DimSpec::uniform(6, 4, 3).unwrap();
        let (x, _t) = synth::generate_parafac2_feasible(&dims, 2, 1).unwrap();
        let w = MaskStack::ones(&DimSpec::uniform(6, 5, 3).unwrap()).unwrap();
        assert!(fit_em(&x, &w, &SolverConfig::new(2), &Init::Seed(0)).is_err());
    }
}
