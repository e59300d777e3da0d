//! Factor match score, degeneracy detection, and run selection.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::aoadmm::FitReport;
use crate::error::{Error, Result};
use crate::model::Parafac2Factors;
use crate::synth::stacked_column;

/// Triple-congruence threshold below whose negation a component pair counts
/// as a two-factor degeneracy.
pub const DEGENERACY_THRESHOLD: f64 = 0.85;

const MAX_EXACT_ASSIGNMENT_RANK: usize = 20;

/// Per-component match scores and the matching itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FmsReport {
    /// Mean over matched components of the per-mode cosine products;
    /// always in [0, 1].
    pub total: f64,
    /// `(score_A, score_B, score_C)` per ground-truth component, in truth
    /// column order.
    pub per_component: Vec<(f64, f64, f64)>,
    /// `permutation[t]` is the estimated column matched to truth column `t`.
    pub permutation: Vec<usize>,
    /// Set when some column had zero norm (its score contributes 0).
    pub zero_norm_flagged: bool,
}

fn abs_cosine(u: &Array1<f64>, v: &Array1<f64>, flag: &mut bool) -> f64 {
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        *flag = true;
        return 0.0;
    }
    (dot / (nu * nv)).abs()
}

fn signed_cosine(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Exact maximum-sum assignment by subset dynamic programming.
/// `score` is square; returns for each column (truth) the matched row (est).
fn best_assignment(score: &Array2<f64>) -> (Vec<usize>, f64) {
    let r = score.nrows();
    let full: usize = (1 << r) - 1;
    // dp[mask] = best total assigning est rows 0..popcount(mask) to the
    // truth columns in mask.
    let mut dp = vec![f64::NEG_INFINITY; 1 << r];
    let mut choice = vec![usize::MAX; 1 << r];
    dp[0] = 0.0;
    for mask in 0usize..=full {
        if dp[mask] == f64::NEG_INFINITY {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row == r {
            continue;
        }
        for col in 0..r {
            if mask & (1 << col) != 0 {
                continue;
            }
            let next = mask | (1 << col);
            let cand = dp[mask] + score[(row, col)];
            if cand > dp[next] {
                dp[next] = cand;
                choice[next] = col;
            }
        }
    }
    // Walk back: row r-1 chose choice[full], etc.
    let mut perm_est_to_truth = vec![0usize; r];
    let mut mask = full;
    for row in (0..r).rev() {
        let col = choice[mask];
        perm_est_to_truth[row] = col;
        mask &= !(1 << col);
    }
    // Invert: truth column -> est row.
    let mut truth_to_est = vec![0usize; r];
    for (row, &col) in perm_est_to_truth.iter().enumerate() {
        truth_to_est[col] = row;
    }
    (truth_to_est, dp[full])
}

/// Factor match score between an estimate and a reference factor set.
///
/// Per matched component the score is the product of absolute cosines of
/// the first-mode columns, the stacked evolving-mode columns (all slices
/// concatenated), and the strength columns; components are matched by the
/// permutation maximizing the summed product, and the total is normalized
/// by the component count so identical factor sets score 1.
pub fn fms(est: &Parafac2Factors, truth: &Parafac2Factors) -> Result<FmsReport> {
    if est.rank() != truth.rank() {
        return Err(Error::ShapeMismatch(format!(
            "rank mismatch: {} vs {}",
            est.rank(),
            truth.rank()
        )));
    }
    if est.dims() != truth.dims() {
        return Err(Error::ShapeMismatch("factor dimensions differ".into()));
    }
    let r = est.rank();
    if r > MAX_EXACT_ASSIGNMENT_RANK {
        return Err(Error::InvalidInput(format!(
            "exact component matching supports rank <= {}",
            MAX_EXACT_ASSIGNMENT_RANK
        )));
    }

    let mut flag = false;
    let est_b: Vec<Array1<f64>> = (0..r).map(|c| stacked_column(&est.b, c)).collect();
    let truth_b: Vec<Array1<f64>> = (0..r).map(|c| stacked_column(&truth.b, c)).collect();

    let mut score_a = Array2::<f64>::zeros((r, r));
    let mut score_b = Array2::<f64>::zeros((r, r));
    let mut score_c = Array2::<f64>::zeros((r, r));
    for e in 0..r {
        for t in 0..r {
            score_a[(e, t)] = abs_cosine(
                &est.a.column(e).to_owned(),
                &truth.a.column(t).to_owned(),
                &mut flag,
            );
            score_b[(e, t)] = abs_cosine(&est_b[e], &truth_b[t], &mut flag);
            score_c[(e, t)] = abs_cosine(
                &est.c.column(e).to_owned(),
                &truth.c.column(t).to_owned(),
                &mut flag,
            );
        }
    }
    let product = &(&score_a * &score_b) * &score_c;
    let (permutation, best_sum) = best_assignment(&product);

    let per_component: Vec<(f64, f64, f64)> = (0..r)
        .map(|t| {
            let e = permutation[t];
            (score_a[(e, t)], score_b[(e, t)], score_c[(e, t)])
        })
        .collect();
    Ok(FmsReport {
        total: best_sum / r as f64,
        per_component,
        permutation,
        zero_norm_flagged: flag,
    })
}

/// Two-factor degeneracy test: some component pair whose signed congruence
/// product over the three modes falls below `-threshold`.
pub fn detect_degenerate(f: &Parafac2Factors, threshold: f64) -> bool {
    let r = f.rank();
    if r < 2 {
        return false;
    }
    let stacked: Vec<Array1<f64>> = (0..r).map(|c| stacked_column(&f.b, c)).collect();
    for p in 0..r {
        for q in p + 1..r {
            let ca = signed_cosine(&f.a.column(p).to_owned(), &f.a.column(q).to_owned());
            let cb = signed_cosine(&stacked[p], &stacked[q]);
            let cc = signed_cosine(&f.c.column(p).to_owned(), &f.c.column(q).to_owned());
            if ca * cb * cc < -threshold {
                return true;
            }
        }
    }
    false
}

/// Index of the lowest-loss run among feasible, non-degenerate candidates.
pub fn best_run(runs: &[(Parafac2Factors, FitReport)]) -> Result<usize> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("empty run list".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (idx, (factors, report)) in runs.iter().enumerate() {
        if !report.feasible || detect_degenerate(factors, DEGENERACY_THRESHOLD) {
            continue;
        }
        let loss = report.final_loss();
        if best.map_or(true, |(_, b)| loss < b) {
            best = Some((idx, loss));
        }
    }
    best.map(|(idx, _)| idx).ok_or(Error::NoFeasibleRun)
}

/// One line of the per-run experiment CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub dataset: String,
    pub mask: String,
    pub method: String,
    pub seed: u64,
    pub loss: f64,
    pub fms: f64,
    pub fms_a: f64,
    pub fms_b: f64,
    pub fms_c: f64,
    pub iters: usize,
    pub seconds: f64,
    pub feasible: bool,
    pub degenerate: bool,
}

pub const RUN_CSV_HEADER: &str =
    "dataset,mask,method,seed,loss,fms,fms_A,fms_B,fms_C,iters,seconds,feasible,degenerate";

impl RunRow {
    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{}", v)
            } else {
                "nan".to_string()
            }
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.mask,
            self.method,
            self.seed,
            fmt(self.loss),
            fmt(self.fms),
            fmt(self.fms_a),
            fmt(self.fms_b),
            fmt(self.fms_c),
            self.iters,
            fmt(self.seconds),
            self.feasible,
            self.degenerate
        )
    }
}

/// Median of a sample; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
