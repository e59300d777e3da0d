//! Synthetic evolving-pattern datasets, noise injection, and missingness
//! masks.
//!
//! Each generated dataset encodes a handful of "concepts": a sparse set of
//! first-mode rows participating in the concept, a slowly drifting support
//! of second-mode columns that transitions from an initial to a final set,
//! and positive per-slice strengths screened for pairwise congruence. Data
//! slices are exact reconstructions of the ground-truth factors.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::procrustes;
use crate::model::Parafac2Factors;
use crate::stack::{DimSpec, MaskStack, SliceStack};

const CONGRUENCE_RETRIES: usize = 500;
const MASK_RETRIES: usize = 1000;

/// Parameters of the evolving-concept generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub n_concepts: usize,
    pub dims: DimSpec,
    /// Fraction of each concept's words kept in both the initial and final
    /// set, hence active at all times.
    pub overlap_keep_fraction: f64,
    /// Standard deviation of the per-step increments on active words.
    pub drift_std: f64,
    /// Per-step probability of each fade-out / fade-in event after the
    /// transition point.
    pub transition_prob: f64,
    /// Range of the uniform strength values in `C`.
    pub strength_range: (f64, f64),
    /// Largest allowed cosine between strength columns.
    pub max_congruence: f64,
    /// Fraction of first-mode rows participating in each concept.
    pub author_fraction: f64,
    /// Fraction of second-mode columns in each concept's word sets.
    pub word_fraction: f64,
}

impl ConceptSpec {
    pub fn new(dims: DimSpec) -> Self {
        ConceptSpec {
            n_concepts: 3,
            dims,
            overlap_keep_fraction: 0.3,
            drift_std: 0.1,
            transition_prob: 0.3,
            strength_range: (1.0, 15.0),
            max_congruence: 0.8,
            author_fraction: 0.2,
            word_fraction: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.n_concepts == 0 {
            return Err(Error::InvalidConfig("n_concepts must be >= 1".into()));
        }
        for (name, v) in [
            ("overlap_keep_fraction", self.overlap_keep_fraction),
            ("transition_prob", self.transition_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{} must lie in [0,1]", name)));
            }
        }
        for (name, v) in [
            ("author_fraction", self.author_fraction),
            ("word_fraction", self.word_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{} must lie in (0,1]", name)));
            }
        }
        if self.drift_std < 0.0 {
            return Err(Error::InvalidConfig("drift_std must be >= 0".into()));
        }
        if self.strength_range.0 > self.strength_range.1 {
            return Err(Error::InvalidConfig("strength_range must be ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.max_congruence) {
            return Err(Error::InvalidConfig("max_congruence must lie in [0,1]".into()));
        }
        let j = self
            .dims
            .uniform_j()
            .ok_or_else(|| Error::InvalidInput("generator requires all J_k equal".into()))?;
        if self.n_concepts > self.dims.i.min(j) {
            return Err(Error::InvalidInput(
                "n_concepts exceeds the smallest data dimension".into(),
            ));
        }
        Ok(())
    }
}

fn column_cosine(c: &Array2<f64>, p: usize, q: usize) -> f64 {
    let (mut dot, mut np, mut nq) = (0.0, 0.0, 0.0);
    for k in 0..c.nrows() {
        dot += c[(k, p)] * c[(k, q)];
        np += c[(k, p)] * c[(k, p)];
        nq += c[(k, q)] * c[(k, q)];
    }
    if np == 0.0 || nq == 0.0 {
        0.0
    } else {
        dot / (np * nq).sqrt()
    }
}

fn draw_strengths(
    k: usize,
    r: usize,
    range: (f64, f64),
    max_congruence: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let dist = Uniform::new(range.0, range.1)
        .map_err(|e| Error::InvalidConfig(format!("strength range: {}", e)))?;
    for _ in 0..CONGRUENCE_RETRIES {
        let c = Array2::from_shape_fn((k, r), |_| dist.sample(rng));
        let mut ok = true;
        'pairs: for p in 0..r {
            for q in p + 1..r {
                if column_cosine(&c, p, q) > max_congruence {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            return Ok(c);
        }
    }
    Err(Error::GenerationFailed(format!(
        "could not satisfy congruence <= {} in {} draws",
        max_congruence, CONGRUENCE_RETRIES
    )))
}

/// Generates one dataset and its ground-truth factors. The returned data is
/// the exact reconstruction of the factors; the ground-truth evolving
/// factors are free patterns and need not satisfy the cross-product
/// constraint. Deterministic given `(spec, seed)`.
pub fn generate(spec: &ConceptSpec, seed: u64) -> Result<(SliceStack, Parafac2Factors)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (i_dim, k_dim) = (spec.dims.i, spec.dims.k);
    let j_dim = spec.dims.uniform_j().expect("validated uniform");
    let r = spec.n_concepts;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let drift = Normal::new(0.0, spec.drift_std.max(f64::MIN_POSITIVE)).expect("drift normal");

    // First mode: sparse participation values on a random support.
    let mut a = Array2::<f64>::zeros((i_dim, r));
    for rr in 0..r {
        let support = ((spec.author_fraction * i_dim as f64).round() as usize)
            .clamp(1, i_dim);
        for idx in sample(&mut rng, i_dim, support) {
            a[(idx, rr)] = normal.sample(&mut rng);
        }
    }

    // Second mode: per-concept word timelines.
    let mut b: Vec<Array2<f64>> = vec![Array2::zeros((j_dim, r)); k_dim];
    for rr in 0..r {
        let w = ((spec.word_fraction * j_dim as f64).round() as usize).clamp(2, j_dim);
        let overlap = ((spec.overlap_keep_fraction * w as f64).ceil() as usize).clamp(1, w);
        let exclusive = w - overlap;
        // Disjoint word pools: overlap, initial-only, final-only.
        let needed = overlap + 2 * exclusive;
        let pool = sample(&mut rng, j_dim, needed.min(j_dim)).into_vec();
        let overlap_set: Vec<usize> = pool[..overlap].to_vec();
        let initial_only: Vec<usize> = pool[overlap..overlap + exclusive].to_vec();
        let final_only: Vec<usize> =
            pool[overlap + exclusive..(overlap + 2 * exclusive).min(pool.len())].to_vec();

        let mut values = vec![0.0f64; j_dim];
        for &j in overlap_set.iter().chain(initial_only.iter()) {
            values[j] = normal.sample(&mut rng);
        }
        // Fading words hold (value at fade start, fade start step).
        let mut fading: Vec<(usize, f64, usize)> = Vec::new();
        let mut active_initial_only = initial_only.clone();
        let mut inactive_final: Vec<usize> = final_only.clone();

        // Transition point in the middle half of the timeline.
        let lo = k_dim / 4;
        let hi = (3 * k_dim) / 4;
        let transition = if hi > lo {
            lo + (rng.random::<u64>() as usize) % (hi - lo)
        } else {
            lo
        }
        .max(1);

        for j in 0..j_dim {
            b[0][(j, rr)] = values[j];
        }
        for step in 1..k_dim {
            // Smooth drift on active, non-fading words.
            for &j in overlap_set.iter() {
                values[j] += drift.sample(&mut rng);
            }
            for &j in active_initial_only.iter() {
                values[j] += drift.sample(&mut rng);
            }
            for &j in final_only.iter() {
                if values[j] != 0.0 && !fading.iter().any(|f| f.0 == j) {
                    values[j] += drift.sample(&mut rng);
                }
            }
            // Deterministic ramp to zero for fading words.
            for &(j, v0, start) in fading.iter() {
                let span = (k_dim - start).max(1) as f64;
                let progress = (step - start) as f64 / span;
                values[j] = v0 * (1.0 - progress).max(0.0);
            }
            if step >= transition {
                if rng.random::<f64>() < spec.transition_prob && !active_initial_only.is_empty() {
                    let pick = (rng.random::<u64>() as usize) % active_initial_only.len();
                    let j = active_initial_only.swap_remove(pick);
                    fading.push((j, values[j], step));
                }
                if rng.random::<f64>() < spec.transition_prob && !inactive_final.is_empty() {
                    let pick = (rng.random::<u64>() as usize) % inactive_final.len();
                    let j = inactive_final.swap_remove(pick);
                    values[j] = drift.sample(&mut rng);
                }
            }
            for j in 0..j_dim {
                b[step][(j, rr)] = values[j];
            }
        }
    }

    let c = draw_strengths(k_dim, r, spec.strength_range, spec.max_congruence, &mut rng)?;
    let truth = Parafac2Factors::new(a, b, c)?;
    let x = truth.reconstruct();
    Ok((x, truth))
}

/// Ground truth that satisfies the cross-product constraint exactly:
/// `B_k = P_k B` with random orthonormal `P_k` and a shared coordinate
/// factor; strengths are screened positives as in [`generate`].
pub fn generate_parafac2_feasible(
    dims: &DimSpec,
    rank: usize,
    seed: u64,
) -> Result<(SliceStack, Parafac2Factors)> {
    dims.validate()?;
    if rank == 0 || dims.j.iter().any(|&j| j < rank) {
        return Err(Error::InvalidInput(
            "rank must satisfy 1 <= R <= min J_k".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let a = Array2::from_shape_fn((dims.i, rank), |_| normal.sample(&mut rng));
    // Screen the coordinate factor for conditioning; a near-singular draw
    // makes the evolving components nearly collinear and the ground truth
    // unrecoverable in principle.
    let coord = {
        let mut coord = Array2::from_shape_fn((rank, rank), |_| normal.sample(&mut rng));
        for _ in 0..CONGRUENCE_RETRIES {
            let (_u, s, _vt) = crate::linalg::thin_svd(&coord);
            if s[rank - 1] > 0.0 && s[0] / s[rank - 1] <= 10.0 {
                break;
            }
            coord = Array2::from_shape_fn((rank, rank), |_| normal.sample(&mut rng));
        }
        coord
    };
    let b = dims
        .j
        .iter()
        .map(|&j| {
            let g = Array2::from_shape_fn((j, rank), |_| normal.sample(&mut rng));
            procrustes(&g).dot(&coord)
        })
        .collect();
    let c = draw_strengths(dims.k, rank, (1.0, 15.0), 0.8, &mut rng)?;
    let truth = Parafac2Factors::new(a, b, c)?;
    let x = truth.reconstruct();
    Ok((x, truth))
}

/// Adds Gaussian noise scaled so that `|X_noisy - X| / |X|` equals `eta`
/// exactly.
pub fn add_noise(x: &SliceStack, eta: f64, seed: u64) -> Result<SliceStack> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidInput("noise level must be >= 0".into()));
    }
    if eta == 0.0 {
        return Ok(x.clone());
    }
    let x_norm = x.frobenius_norm(None)?;
    if x_norm == 0.0 {
        return Err(Error::InvalidInput(
            "cannot scale noise against a zero-norm input".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let theta: Vec<Array2<f64>> = x
        .slices()
        .iter()
        .map(|s| Array2::from_shape_fn(s.raw_dim(), |_| normal.sample(&mut rng)))
        .collect();
    let theta_norm = theta
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = eta * x_norm / theta_norm;
    let slices = x
        .slices()
        .iter()
        .zip(theta.iter())
        .map(|(s, t)| s + &(t * scale))
        .collect();
    SliceStack::new(slices)
}

/// Missingness families for [`make_mask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Uniformly sampled missing entries; `fraction` is the entry fraction.
    Random,
    /// Whole mode-2 fibers (rows of a slice) missing; `fraction` is the
    /// fiber fraction.
    Fiber2,
    /// Whole mode-3 fibers (an (i, j) position across all slices) missing;
    /// `fraction` is the fiber fraction. Requires a uniform second mode.
    Fiber3,
    /// Half of the missing-entry budget from whole mode-2 fibers, half
    /// random; `fraction` is the entry fraction.
    Mixed,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskKind::Random),
            "fiber2" => Ok(MaskKind::Fiber2),
            "fiber3" => Ok(MaskKind::Fiber3),
            "mixed" => Ok(MaskKind::Mixed),
            other => Err(Error::InvalidInput(format!("unknown mask kind '{}'", other))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskKind::Random => "random",
            MaskKind::Fiber2 => "fiber2",
            MaskKind::Fiber3 => "fiber3",
            MaskKind::Mixed => "mixed",
        };
        write!(f, "{}", s)
    }
}

fn flat_to_ijk(dims: &DimSpec, mut flat: usize) -> (usize, usize, usize) {
    for (k, &j) in dims.j.iter().enumerate() {
        let n = dims.i * j;
        if flat < n {
            return (flat / j, flat % j, k);
        }
        flat -= n;
    }
    unreachable!("flat index within bounds")
}

fn build_random_mask(dims: &DimSpec, n_missing: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let mut slices: Vec<Array2<f64>> = dims.j.iter().map(|&j| Array2::ones((dims.i, j))).collect();
    let total = dims.n_entries();
    for flat in sample(rng, total, n_missing) {
        let (i, j, k) = flat_to_ijk(dims, flat);
        slices[k][(i, j)] = 0.0;
    }
    slices
}

fn violates_fiber_rule(slices: &[Array2<f64>]) -> bool {
    slices.iter().any(|s| {
        (0..s.ncols()).any(|j| s.column(j).iter().all(|&v| v == 0.0))
    })
}

/// Draws a missingness mask. Never produces an all-missing mode-1 fiber or
/// an all-missing slice; violating draws are resampled up to a retry budget,
/// after which the fraction is reported as infeasible.
pub fn make_mask(dims: &DimSpec, kind: MaskKind, fraction: f64, seed: u64) -> Result<MaskStack> {
    dims.validate()?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput("fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = dims.n_entries();

    for _ in 0..MASK_RETRIES {
        let slices: Vec<Array2<f64>> = match kind {
            MaskKind::Random => {
                let n_missing = (fraction * total as f64).round() as usize;
                build_random_mask(dims, n_missing, &mut rng)
            }
            MaskKind::Fiber2 => {
                let n_fibers = dims.i * dims.k;
                let remove = (fraction * n_fibers as f64).round() as usize;
                let mut slices: Vec<Array2<f64>> =
                    dims.j.iter().map(|&j| Array2::ones((dims.i, j))).collect();
                for flat in sample(&mut rng, n_fibers, remove) {
                    let (i, k) = (flat % dims.i, flat / dims.i);
                    slices[k].row_mut(i).fill(0.0);
                }
                slices
            }
            MaskKind::Fiber3 => {
                let j_dim = dims.uniform_j().ok_or_else(|| {
                    Error::InvalidInput("fiber3 masks require all J_k equal".into())
                })?;
                let n_fibers = dims.i * j_dim;
                let remove = (fraction * n_fibers as f64).round() as usize;
                let mut slices: Vec<Array2<f64>> =
                    dims.j.iter().map(|&j| Array2::ones((dims.i, j))).collect();
                for flat in sample(&mut rng, n_fibers, remove) {
                    let (i, j) = (flat % dims.i, flat / dims.i);
                    for s in slices.iter_mut() {
                        s[(i, j)] = 0.0;
                    }
                }
                slices
            }
            MaskKind::Mixed => {
                let j_dim = dims.uniform_j().ok_or_else(|| {
                    Error::InvalidInput("mixed masks require all J_k equal".into())
                })?;
                let budget = (fraction * total as f64).round() as usize;
                let n_fibers = ((budget as f64 / 2.0) / j_dim as f64).round() as usize;
                let n_fibers = n_fibers.min(dims.i * dims.k);
                let mut slices: Vec<Array2<f64>> =
                    dims.j.iter().map(|&j| Array2::ones((dims.i, j))).collect();
                let mut removed_rows = Vec::new();
                for flat in sample(&mut rng, dims.i * dims.k, n_fibers) {
                    let (i, k) = (flat % dims.i, flat / dims.i);
                    slices[k].row_mut(i).fill(0.0);
                    removed_rows.push((i, k));
                }
                // Random remainder drawn from still-observed positions.
                let leftover = budget.saturating_sub(n_fibers * j_dim);
                let mut observed: Vec<(usize, usize, usize)> = Vec::new();
                for k in 0..dims.k {
                    for i in 0..dims.i {
                        if slices[k][(i, 0)] == 0.0 {
                            continue;
                        }
                        for j in 0..dims.j[k] {
                            observed.push((i, j, k));
                        }
                    }
                }
                if leftover > observed.len() {
                    return Err(Error::GenerationFailed(
                        "mixed mask budget exceeds observable entries".into(),
                    ));
                }
                for idx in sample(&mut rng, observed.len(), leftover) {
                    let (i, j, k) = observed[idx];
                    slices[k][(i, j)] = 0.0;
                }
                slices
            }
        };
        if !violates_fiber_rule(&slices) {
            return MaskStack::new(slices);
        }
    }
    Err(Error::GenerationFailed(format!(
        "no {} mask with fraction {} satisfied the fiber rule in {} draws",
        kind, fraction, MASK_RETRIES
    )))
}

pub(crate) fn stacked_column(b: &[Array2<f64>], r: usize) -> Array1<f64> {
    let len: usize = b.iter().map(|m| m.nrows()).sum();
    let mut out = Array1::zeros(len);
    let mut at = 0;
    for m in b {
        for j in 0..m.nrows() {
            out[at] = m[(j, r)];
            at += 1;
        }
    }
    out
}
