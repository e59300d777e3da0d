//! Experiment-grid runner: every (dataset, mask, method, start) cell fits
//! independently, best runs are selected per cell, and results aggregate
//! into CSV tables.

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parafac2_core::aoadmm::FitReport;
use parafac2_core::eval::{self, median, RunRow, RUN_CSV_HEADER};
use parafac2_core::{
    bundle, detect_degenerate, MaskStack, Parafac2Factors, SliceStack, SolverConfig,
};

use crate::commands::{run_method, Method, MissingStrategy};

#[derive(Args)]
pub struct BenchmarkArgs {
    /// Grid specification JSON.
    #[arg(long)]
    pub grid: PathBuf,
    /// Output directory for runs.csv, best.csv, summary.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; parallelism is across runs, never inside a fit.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Deserialize)]
struct GridSpec {
    /// Dataset bundle directories.
    datasets: Vec<String>,
    /// Mask selectors: "none" or a path relative to each dataset directory
    /// (absolute paths are used as-is).
    #[serde(default = "default_masks")]
    masks: Vec<String>,
    methods: Vec<MethodSpec>,
    #[serde(default = "default_starts")]
    starts: usize,
    #[serde(default)]
    seed: u64,
}

fn default_masks() -> Vec<String> {
    vec!["none".to_string()]
}
fn default_starts() -> usize {
    1
}

#[derive(Deserialize)]
struct MethodSpec {
    name: String,
    method: Method,
    #[serde(default = "default_missing")]
    missing: MissingStrategy,
    config: SolverConfig,
}

fn default_missing() -> MissingStrategy {
    MissingStrategy::None
}

struct Dataset {
    label: String,
    x: Arc<SliceStack>,
    truth: Option<Arc<Parafac2Factors>>,
}

struct Cell {
    dataset_idx: usize,
    mask_label: String,
    mask: Option<Arc<MaskStack>>,
    method_idx: usize,
    init_base: u64,
}

fn fms_columns(
    factors: &Parafac2Factors,
    truth: Option<&Parafac2Factors>,
) -> (f64, f64, f64, f64) {
    match truth {
        Some(t) => match parafac2_core::fms(factors, t) {
            Ok(report) => {
                let r = report.per_component.len().max(1) as f64;
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for (sa, sb, sc) in &report.per_component {
                    a += sa;
                    b += sb;
                    c += sc;
                }
                (report.total, a / r, b / r, c / r)
            }
            Err(_) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        },
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    }
}

fn row_from_run(
    dataset: &str,
    mask: &str,
    method: &str,
    seed: u64,
    outcome: &parafac2_core::Result<(Parafac2Factors, FitReport)>,
    truth: Option<&Parafac2Factors>,
) -> RunRow {
    match outcome {
        Ok((factors, report)) => {
            let (fms, fms_a, fms_b, fms_c) = fms_columns(factors, truth);
            RunRow {
                dataset: dataset.to_string(),
                mask: mask.to_string(),
                method: method.to_string(),
                seed,
                loss: report.final_loss(),
                fms,
                fms_a,
                fms_b,
                fms_c,
                iters: report.n_outer,
                seconds: report.wall_time,
                feasible: report.feasible,
                degenerate: detect_degenerate(factors, eval::DEGENERACY_THRESHOLD),
            }
        }
        Err(_) => RunRow {
            dataset: dataset.to_string(),
            mask: mask.to_string(),
            method: method.to_string(),
            seed,
            loss: f64::NAN,
            fms: f64::NAN,
            fms_a: f64::NAN,
            fms_b: f64::NAN,
            fms_c: f64::NAN,
            iters: 0,
            seconds: f64::NAN,
            feasible: false,
            degenerate: false,
        },
    }
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<()> {
    let text = fs::read_to_string(&args.grid)
        .with_context(|| format!("reading {}", args.grid.display()))?;
    let grid: GridSpec = serde_json::from_str(&text).context("parsing grid spec")?;
    if grid.datasets.is_empty() || grid.methods.is_empty() {
        bail!("grid needs at least one dataset and one method");
    }
    for spec in &grid.methods {
        spec.config.validate()?;
        if spec.method == Method::Als && spec.missing == MissingStrategy::Rw {
            bail!("method '{}': ALS only supports EM", spec.name);
        }
    }

    let datasets: Vec<Dataset> = grid
        .datasets
        .iter()
        .map(|label| -> Result<Dataset> {
            let dir = Path::new(label);
            let x = Arc::new(bundle::load_stack(dir)?);
            let truth_dir = dir.join("truth");
            let truth = if truth_dir.join("manifest.json").exists() {
                Some(Arc::new(bundle::load_factors(&truth_dir)?))
            } else {
                None
            };
            Ok(Dataset {
                label: label.clone(),
                x,
                truth,
            })
        })
        .collect::<Result<_>>()?;

    // Build the cell grid. Initialization seeds depend on (dataset, mask,
    // start) but not on the method, so methods share starting points.
    let mut cells = Vec::new();
    for (d_idx, dataset) in datasets.iter().enumerate() {
        for (m_idx, selector) in grid.masks.iter().enumerate() {
            let mask = if selector == "none" {
                None
            } else {
                let path = if Path::new(selector).is_absolute() {
                    PathBuf::from(selector)
                } else {
                    Path::new(&dataset.label).join(selector)
                };
                let w = bundle::load_mask(&path)?;
                if w.dims() != dataset.x.dims() {
                    bail!(
                        "mask {} does not match dataset {}",
                        path.display(),
                        dataset.label
                    );
                }
                Some(Arc::new(w))
            };
            for method_idx in 0..grid.methods.len() {
                cells.push(Cell {
                    dataset_idx: d_idx,
                    mask_label: selector.clone(),
                    mask: mask.clone(),
                    method_idx,
                    init_base: grid
                        .seed
                        .wrapping_add(10_000 * d_idx as u64)
                        .wrapping_add(100 * m_idx as u64),
                });
            }
        }
    }

    // Flatten to independent runs and execute with bounded parallelism.
    let runs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(cell_idx, cell)| {
            (0..grid.starts.max(1)).map(move |s| (cell_idx, cell.init_base.wrapping_add(s as u64)))
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel.max(1))
        .build()
        .context("building worker pool")?;
    let outcomes: Vec<parafac2_core::Result<(Parafac2Factors, FitReport)>> = pool.install(|| {
        use rayon::prelude::*;
        runs.par_iter()
            .map(|&(cell_idx, seed)| {
                let cell = &cells[cell_idx];
                let dataset = &datasets[cell.dataset_idx];
                let spec = &grid.methods[cell.method_idx];
                run_method(
                    spec.method,
                    spec.missing,
                    &dataset.x,
                    cell.mask.as_deref(),
                    &spec.config,
                    &parafac2_core::Init::Seed(seed),
                )
            })
            .collect()
    });

    // Per-run rows, then per-cell best rows.
    let mut run_rows = Vec::new();
    let mut per_cell: Vec<Vec<(u64, usize)>> = vec![Vec::new(); cells.len()];
    for (run_idx, ((cell_idx, seed), outcome)) in runs.iter().zip(outcomes.iter()).enumerate() {
        let cell = &cells[*cell_idx];
        let dataset = &datasets[cell.dataset_idx];
        let spec = &grid.methods[cell.method_idx];
        run_rows.push(row_from_run(
            &dataset.label,
            &cell.mask_label,
            &spec.name,
            *seed,
            outcome,
            dataset.truth.as_deref(),
        ));
        per_cell[*cell_idx].push((*seed, run_idx));
    }

    let mut best_rows = Vec::new();
    for (cell_idx, members) in per_cell.iter().enumerate() {
        let cell = &cells[cell_idx];
        let dataset = &datasets[cell.dataset_idx];
        let spec = &grid.methods[cell.method_idx];
        let candidates: Vec<(Parafac2Factors, FitReport)> = members
            .iter()
            .filter_map(|&(_seed, run_idx)| outcomes[run_idx].as_ref().ok().cloned())
            .collect();
        let candidate_seeds: Vec<u64> = members
            .iter()
            .filter(|&&(_s, run_idx)| outcomes[run_idx].is_ok())
            .map(|&(s, _)| s)
            .collect();
        match eval::best_run(&candidates) {
            Ok(best) => {
                let (factors, report) = &candidates[best];
                let (fms, fms_a, fms_b, fms_c) = fms_columns(factors, dataset.truth.as_deref());
                best_rows.push(RunRow {
                    dataset: dataset.label.clone(),
                    mask: cell.mask_label.clone(),
                    method: spec.name.clone(),
                    seed: candidate_seeds[best],
                    loss: report.final_loss(),
                    fms,
                    fms_a,
                    fms_b,
                    fms_c,
                    iters: report.n_outer,
                    seconds: report.wall_time,
                    feasible: true,
                    degenerate: false,
                });
            }
            Err(_) => {
                // Failed cell: recorded with no metrics, grid continues.
                best_rows.push(RunRow {
                    dataset: dataset.label.clone(),
                    mask: cell.mask_label.clone(),
                    method: spec.name.clone(),
                    seed: cell.init_base,
                    loss: f64::NAN,
                    fms: f64::NAN,
                    fms_a: f64::NAN,
                    fms_b: f64::NAN,
                    fms_c: f64::NAN,
                    iters: 0,
                    seconds: f64::NAN,
                    feasible: false,
                    degenerate: false,
                });
            }
        }
    }

    let sort_key = |r: &RunRow| (r.dataset.clone(), r.mask.clone(), r.method.clone(), r.seed);
    run_rows.sort_by_key(sort_key);
    best_rows.sort_by_key(sort_key);

    fs::create_dir_all(&args.out)?;
    write_rows(&args.out.join("runs.csv"), &run_rows)?;
    write_rows(&args.out.join("best.csv"), &best_rows)?;

    // Summary: medians of the best runs per (method, mask) group.
    let mut groups: Vec<(String, String)> = best_rows
        .iter()
        .map(|r| (r.method.clone(), r.mask.clone()))
        .collect();
    groups.sort();
    groups.dedup();
    let mut summary_lines = vec!["method,mask,cells,median_fms,median_seconds,median_iters".to_string()];
    println!(
        "{:<20} {:<24} {:>5} {:>12} {:>14} {:>12}",
        "method", "mask", "cells", "median_fms", "median_seconds", "median_iters"
    );
    for (method, mask) in groups {
        let members: Vec<&RunRow> = best_rows
            .iter()
            .filter(|r| r.method == method && r.mask == mask)
            .collect();
        let fms_vals: Vec<f64> = members
            .iter()
            .filter(|r| r.fms.is_finite())
            .map(|r| r.fms)
            .collect();
        let secs: Vec<f64> = members
            .iter()
            .filter(|r| r.seconds.is_finite())
            .map(|r| r.seconds)
            .collect();
        let iters: Vec<f64> = members.iter().map(|r| r.iters as f64).collect();
        let line = format!(
            "{},{},{},{},{},{}",
            method,
            mask,
            members.len(),
            median(&fms_vals),
            median(&secs),
            median(&iters)
        );
        println!(
            "{:<20} {:<24} {:>5} {:>12.4} {:>14.4} {:>12.1}",
            method,
            mask,
            members.len(),
            median(&fms_vals),
            median(&secs),
            median(&iters)
        );
        summary_lines.push(line);
    }
    fs::write(args.out.join("summary.csv"), summary_lines.join("\n") + "\n")?;
    println!(
        "wrote {} runs, {} cells to {}",
        run_rows.len(),
        best_rows.len(),
        args.out.display()
    );
    Ok(())
}

fn write_rows(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut text = String::from(RUN_CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
