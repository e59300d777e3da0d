//! The generate / fit / fms / inspect subcommands.

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;

use parafac2_core::aoadmm::FitReport;
use parafac2_core::{
    bundle, check_constraint, detect_degenerate, eval, fit_als, fit_em, fit_rw, model, synth,
    AlsConfig, ConceptSpec, DimSpec, Init, MaskKind, MaskStack, Parafac2Factors, SliceStack,
    SolverConfig,
};

/// `IxJxK` dimension triple, e.g. `30x20x10`.
fn parse_size(text: &str) -> Result<DimSpec> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 3 {
        bail!("size must be IxJxK, got '{}'", text);
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().context("size components must be integers"))
        .collect::<Result<_>>()?;
    Ok(DimSpec::uniform(nums[0], nums[1], nums[2])?)
}

/// `kind:fraction` mask request, e.g. `random:0.25`.
#[derive(Debug, Clone)]
pub struct MaskRequest {
    pub kind: MaskKind,
    pub fraction: f64,
}

impl std::str::FromStr for MaskRequest {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, fraction) = s
            .split_once(':')
            .with_context(|| format!("mask must be kind:fraction, got '{}'", s))?;
        Ok(MaskRequest {
            kind: kind.parse::<MaskKind>()?,
            fraction: fraction.parse::<f64>().context("mask fraction")?,
        })
    }
}

impl MaskRequest {
    pub fn dir_name(&self, index: usize) -> String {
        format!("{}_{:.2}_{:02}", self.kind, self.fraction, index)
    }
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Output directory; one `dataset_NNN` bundle per dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub datasets: usize,
    /// Dimensions as IxJxK.
    #[arg(long, default_value = "30x20x10", value_parser = parse_size)]
    pub size: DimSpec,
    #[arg(long, default_value_t = 3)]
    pub concepts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative noise level eta; the stored data satisfies
    /// |X_noisy - X| / |X| = eta exactly.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Mask request `kind:fraction`; repeatable.
    #[arg(long = "mask")]
    pub masks: Vec<MaskRequest>,
    /// Number of masks drawn per request.
    #[arg(long, default_value_t = 1)]
    pub masks_per_spec: usize,
    /// Ground truth satisfying the cross-product constraint exactly,
    /// instead of free evolving concepts.
    #[arg(long, default_value_t = false)]
    pub feasible: bool,
    /// Full generator spec as JSON; overrides --size and --concepts.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

/// Everything needed to reproduce one generated dataset bundle.
#[derive(Serialize, Deserialize)]
struct GenerationRecord {
    spec: ConceptSpec,
    feasible_truth: bool,
    dataset_seed: u64,
    noise: Option<f64>,
    noise_seed: Option<u64>,
    masks: Vec<MaskRecord>,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    kind: String,
    fraction: f64,
    seed: u64,
    path: String,
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ConceptSpec>(&text).context("parsing generator spec")?
        }
        None => {
            let mut s = ConceptSpec::new(args.size.clone());
            s.n_concepts = args.concepts;
            s
        }
    };
    if args.spec.is_none() {
        spec.dims = args.size.clone();
    }
    spec.validate()?;

    for d in 0..args.datasets {
        let dataset_seed = args.seed.wrapping_add(d as u64);
        let (clean, truth) = if args.feasible {
            synth::generate_parafac2_feasible(&spec.dims, spec.n_concepts, dataset_seed)?
        } else {
            synth::generate(&spec, dataset_seed)?
        };
        let noise_seed = args.noise.map(|_| dataset_seed.wrapping_add(1_000_000));
        let data = match (args.noise, noise_seed) {
            (Some(eta), Some(ns)) => synth::add_noise(&clean, eta, ns)?,
            _ => clean,
        };

        let dir = args.out.join(format!("dataset_{:03}", d));
        bundle::save_stack(&dir, &data)?;
        bundle::save_factors(&dir.join("truth"), &truth)?;

        let mut mask_records = Vec::new();
        for (m_idx, request) in args.masks.iter().enumerate() {
            for rep in 0..args.masks_per_spec {
                let mask_seed = dataset_seed
                    .wrapping_add(2_000_000)
                    .wrapping_add((m_idx * 1000 + rep) as u64);
                let mask = synth::make_mask(&data.dims(), request.kind, request.fraction, mask_seed)?;
                let rel = format!("masks/{}", request.dir_name(rep));
                bundle::save_mask(&dir.join(&rel), &mask)?;
                mask_records.push(MaskRecord {
                    kind: request.kind.to_string(),
                    fraction: request.fraction,
                    seed: mask_seed,
                    path: rel,
                });
            }
        }

        let record = GenerationRecord {
            spec: spec.clone(),
            feasible_truth: args.feasible,
            dataset_seed,
            noise: args.noise,
            noise_seed,
            masks: mask_records,
        };
        fs::write(
            dir.join("generation.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// AO-ADMM, plain or ridge depending on the lambdas.
    Aoadmm,
    /// AO-ADMM with a positive temporal-smoothness weight.
    Tparafac2,
    /// Direct-fitting ALS baseline.
    Als,
}

impl std::str::FromStr for Method {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aoadmm" => Ok(Method::Aoadmm),
            "tparafac2" => Ok(Method::Tparafac2),
            "als" => Ok(Method::Als),
            other => bail!("unknown method '{}' (expected aoadmm|tparafac2|als)", other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingStrategy {
    None,
    Em,
    Rw,
}

impl std::str::FromStr for MissingStrategy {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MissingStrategy::None),
            "em" => Ok(MissingStrategy::Em),
            "rw" => Ok(MissingStrategy::Rw),
            other => bail!("unknown missing strategy '{}' (expected none|em|rw)", other),
        }
    }
}

/// Dispatches a single run of the requested method / missing-data strategy.
pub fn run_method(
    method: Method,
    missing: MissingStrategy,
    x: &SliceStack,
    mask: Option<&MaskStack>,
    cfg: &SolverConfig,
    init: &Init,
) -> parafac2_core::Result<(Parafac2Factors, FitReport)> {
    match method {
        Method::Als => {
            let als_cfg = AlsConfig {
                rank: cfg.rank,
                eps_rel: cfg.eps_rel,
                max_outer: cfg.max_outer,
                seed: cfg.seed,
                nonneg_a: false,
                nonneg_c: false,
            };
            fit_als(x, &als_cfg, mask, init)
        }
        Method::Aoadmm | Method::Tparafac2 => match (missing, mask) {
            (MissingStrategy::Em, Some(w)) => fit_em(x, w, cfg, init),
            (MissingStrategy::Rw, Some(w)) => fit_rw(x, w, cfg, init),
            _ => parafac2_core::fit(x, cfg, init),
        },
    }
}

fn validate_method(method: Method, missing: MissingStrategy, cfg: &SolverConfig) -> Result<()> {
    if method == Method::Tparafac2 && !(cfg.lambda_b > 0.0) {
        bail!("tparafac2 requires lambda_B > 0 (set --lambda-b)");
    }
    if method == Method::Als && missing == MissingStrategy::Rw {
        bail!("the ALS baseline only supports EM for missing data");
    }
    Ok(())
}

#[derive(Args)]
pub struct FitArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the best factors and the run report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "aoadmm")]
    pub method: Method,
    #[arg(long, default_value = "none")]
    pub missing: MissingStrategy,
    /// Mask bundle directory (enables the chosen missing-data strategy).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Solver configuration JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short = 'R')]
    pub rank: Option<usize>,
    /// Shorthand setting both lambda_A and lambda_D.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub lambda_b: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub nonneg_c: Option<bool>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub eps_rel: Option<f64>,
    #[arg(long)]
    pub eps_feas: Option<f64>,
    /// Number of multi-start runs (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub starts: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn resolve_config(args: &FitArgs) -> Result<SolverConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SolverConfig>(&text).context("parsing solver config")?
        }
        None => SolverConfig::new(args.rank.unwrap_or(3)),
    };
    if let Some(r) = args.rank {
        cfg.rank = r;
    }
    if let Some(l) = args.lambda {
        cfg.lambda_a = l;
        cfg.lambda_d = l;
    }
    if let Some(l) = args.lambda_a {
        cfg.lambda_a = l;
    }
    if let Some(l) = args.lambda_b {
        cfg.lambda_b = l;
    }
    if let Some(l) = args.lambda_d {
        cfg.lambda_d = l;
    }
    if let Some(flag) = args.nonneg_c {
        cfg.nonneg_c = flag;
    }
    if let Some(n) = args.max_outer {
        cfg.max_outer = n;
    }
    if let Some(e) = args.eps_rel {
        cfg.eps_rel = e;
    }
    if let Some(e) = args.eps_feas {
        cfg.eps_feas = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Multi-start runner shared by `fit` and the benchmark grid. Starts are
/// independent and run in parallel; a single fit stays sequential so runs
/// are deterministic and timings comparable.
pub fn multi_start(
    method: Method,
    missing: MissingStrategy,
    x: &SliceStack,
    mask: Option<&MaskStack>,
    cfg: &SolverConfig,
    base_seed: u64,
    starts: usize,
) -> Vec<(u64, parafac2_core::Result<(Parafac2Factors, FitReport)>)> {
    use rayon::prelude::*;
    (0..starts)
        .into_par_iter()
        .map(|s| {
            let seed = base_seed.wrapping_add(s as u64);
            let init = Init::Seed(seed);
            (seed, run_method(method, missing, x, mask, cfg, &init))
        })
        .collect()
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    loss: Option<f64>,
    n_outer: Option<usize>,
    exit_reason: Option<parafac2_core::ExitReason>,
    feasible: bool,
    degenerate: bool,
    wall_time: Option<f64>,
    max_crossprod_deviation: Option<f64>,
    feasibility_gaps: Option<model::FeasibilityGaps>,
    error: Option<String>,
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    validate_method(args.method, args.missing, &cfg)?;
    let x = bundle::load_stack(&args.data)?;
    let mask = match &args.mask {
        Some(dir) => Some(bundle::load_mask(dir)?),
        None => None,
    };
    if mask.is_none() && args.missing != MissingStrategy::None {
        bail!("--missing {:?} requires --mask", args.missing);
    }

    let outcomes = multi_start(
        args.method,
        args.missing,
        &x,
        mask.as_ref(),
        &cfg,
        cfg.seed,
        args.starts.max(1),
    );

    let mut summaries = Vec::new();
    let mut candidates: Vec<(Parafac2Factors, FitReport)> = Vec::new();
    let mut candidate_seeds = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok((factors, report)) => {
                let degenerate = detect_degenerate(&factors, eval::DEGENERACY_THRESHOLD);
                summaries.push(RunSummary {
                    seed,
                    loss: Some(report.final_loss()),
                    n_outer: Some(report.n_outer),
                    exit_reason: Some(report.exit_reason),
                    feasible: report.feasible,
                    degenerate,
                    wall_time: Some(report.wall_time),
                    max_crossprod_deviation: Some(report.constraint.max_crossprod_deviation),
                    feasibility_gaps: report.constraint.feasibility_gaps.clone(),
                    error: None,
                });
                candidate_seeds.push(seed);
                candidates.push((factors, report));
            }
            Err(err) => summaries.push(RunSummary {
                seed,
                loss: None,
                n_outer: None,
                exit_reason: None,
                feasible: false,
                degenerate: false,
                wall_time: None,
                max_crossprod_deviation: None,
                feasibility_gaps: None,
                error: Some(err.to_string()),
            }),
        }
    }

    let best = eval::best_run(&candidates);
    fs::create_dir_all(&args.out)?;
    let report_json = serde_json::json!({
        "method": args.method,
        "missing": args.missing,
        "config": cfg,
        "data": args.data.display().to_string(),
        "mask": args.mask.as_ref().map(|p| p.display().to_string()),
        "starts": args.starts.max(1),
        "base_seed": cfg.seed,
        "runs": summaries,
        "best_seed": best.as_ref().ok().map(|&i| candidate_seeds[i]),
    });
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report_json)?,
    )?;

    let best = best?;
    bundle::save_factors(&args.out.join("best"), &candidates[best].0)?;
    println!(
        "best run: seed {} loss {:.6e} ({} outer iterations)",
        candidate_seeds[best],
        candidates[best].1.final_loss(),
        candidates[best].1.n_outer
    );
    Ok(())
}

#[derive(Args)]
pub struct FmsArgs {
    /// Estimated factor bundle.
    #[arg(long)]
    pub est: PathBuf,
    /// Reference factor bundle.
    #[arg(long)]
    pub truth: PathBuf,
}

pub fn fms(args: &FmsArgs) -> Result<()> {
    let est = bundle::load_factors(&args.est)?;
    let truth = bundle::load_factors(&args.truth)?;
    let report = parafac2_core::fms(&est, &truth)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Args)]
pub struct InspectArgs {
    /// Bundle directory (data, mask, or factors).
    #[arg(long)]
    pub bundle: PathBuf,
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let manifest = bundle::read_manifest(&args.bundle)?;
    println!(
        "dimensions: I={} K={} J={:?} dtype={}",
        manifest.i, manifest.k, manifest.j, manifest.dtype
    );
    if manifest.r.is_some() && args.bundle.join("A.bin").exists() {
        let f = bundle::load_factors(&args.bundle)?;
        let report = check_constraint(&f);
        println!("kind: factors (R={})", f.rank());
        println!(
            "norms: |A|={:.6} |C|={:.6}",
            f.a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            f.c.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
        println!(
            "cross-product deviation: {:.3e}",
            report.max_crossprod_deviation
        );
    } else if args.bundle.join("mask_000.bin").exists() {
        let w = bundle::load_mask(&args.bundle)?;
        let total = w.dims().n_entries();
        println!("kind: mask");
        println!(
            "missing: {} / {} entries ({:.2}%)",
            w.n_missing(),
            total,
            100.0 * w.n_missing() as f64 / total as f64
        );
    } else {
        let x = bundle::load_stack(&args.bundle)?;
        println!("kind: data");
        println!("frobenius norm: {:.6}", x.frobenius_norm(None)?);
    }
    Ok(())
}
