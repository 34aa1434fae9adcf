//! Batch execution over a dataset: one result row per (image, model, fold,
//! k) combination, failures isolated per task.

use std::path::PathBuf;

use scm_core::pipeline::{run_image, ScmResult};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::fmt_f64;
use crate::manifest::DatasetManifest;

pub const RESULTS_HEADER: [&str; 14] = [
    "image_id",
    "model_id",
    "fold",
    "k",
    "skipped",
    "moran_i",
    "moran_p",
    "r2_ols",
    "r2_wx",
    "r2_lag",
    "r2_error",
    "scm_features",
    "scm_targets",
    "scm_residuals",
];

pub const FAILURES_HEADER: [&str; 5] = ["image_id", "model_id", "fold", "k", "error"];

#[derive(Debug)]
pub struct BatchSummary {
    pub n_results: usize,
    pub n_failures: usize,
    pub results_path: PathBuf,
    pub failures_path: PathBuf,
}

#[cfg(feature = "parallel")]
fn map_tasks<T: Send, F>(tasks: &[(usize, usize)], f: F) -> Vec<T>
where
    F: Fn(usize, usize) -> T + Sync,
{
    use rayon::prelude::*;
    tasks.par_iter().map(|&(fold, k)| f(fold, k)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_tasks<T: Send, F>(tasks: &[(usize, usize)], f: F) -> Vec<T>
where
    F: Fn(usize, usize) -> T + Sync,
{
    tasks.iter().map(|&(fold, k)| f(fold, k)).collect()
}

pub fn result_record(r: &ScmResult) -> [String; 14] {
    let spatial = |f: fn(&scm_core::pipeline::SpatialScms) -> f64| -> String {
        r.spatial
            .as_ref()
            .map(|s| fmt_f64(f(s)))
            .unwrap_or_default()
    };
    [
        r.image_id.clone(),
        r.model_id.clone(),
        r.fold.to_string(),
        r.k.to_string(),
        r.skipped.to_string(),
        fmt_f64(r.moran.i_statistic),
        fmt_f64(r.moran.pseudo_p),
        fmt_f64(r.r2_ols),
        spatial(|s| s.r2_wx),
        spatial(|s| s.r2_lag),
        spatial(|s| s.r2_error),
        spatial(|s| s.scm_features),
        spatial(|s| s.scm_targets),
        spatial(|s| s.scm_residuals),
    ]
}

/// Execute every (image, fold, k) task. Images stream one at a time; the
/// tasks of one image run in parallel but their output order is fixed, so
/// the results table is identical for any parallelism degree.
pub fn run_batch(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<BatchSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let results_path = cfg.out_dir.join("results.csv");
    let failures_path = cfg.out_dir.join("failures.csv");
    let mut results = csv::Writer::from_path(&results_path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", results_path.display())))?;
    let mut failures = csv::Writer::from_path(&failures_path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", failures_path.display())))?;
    let write = |w: &mut csv::Writer<std::fs::File>, rec: &[String]| -> Result<()> {
        w.write_record(rec)
            .map_err(|e| CliError::Config(format!("write failed: {e}")))
    };
    write(&mut results, &RESULTS_HEADER.map(String::from))?;
    write(&mut failures, &FAILURES_HEADER.map(String::from))?;

    let opts = cfg.scm_options();
    let mut n_results = 0usize;
    let mut n_failures = 0usize;
    for row in &manifest.rows {
        let img = match manifest.load_image(row) {
            Ok(img) => img,
            Err(e) => {
                // A broken input file fails the whole image, once.
                write(
                    &mut failures,
                    &[
                        row.image_id.clone(),
                        row.model_id.clone(),
                        String::new(),
                        String::new(),
                        e.to_string(),
                    ],
                )?;
                n_failures += 1;
                continue;
            }
        };
        let mut tasks = Vec::with_capacity(row.folds * cfg.k_list.len());
        for fold in 0..row.folds {
            for &k in &cfg.k_list {
                tasks.push((fold, k));
            }
        }
        let outcomes = map_tasks(&tasks, |fold, k| run_image(&img, fold, k, &opts));
        for ((fold, k), outcome) in tasks.into_iter().zip(outcomes) {
            match outcome {
                Ok(r) => {
                    write(&mut results, &result_record(&r))?;
                    n_results += 1;
                }
                Err(e) => {
                    write(
                        &mut failures,
                        &[
                            row.image_id.clone(),
                            row.model_id.clone(),
                            fold.to_string(),
                            k.to_string(),
                            e.to_string(),
                        ],
                    )?;
                    n_failures += 1;
                }
            }
        }
    }
    results
        .flush()
        .map_err(|e| CliError::io(&results_path, e))?;
    failures
        .flush()
        .map_err(|e| CliError::io(&failures_path, e))?;
    Ok(BatchSummary {
        n_results,
        n_failures,
        results_path,
        failures_path,
    })
}
