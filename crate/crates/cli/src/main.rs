//! `scm`: spatial context measurement for attention-based vision models.
//!
//! Subcommands: `synth` emits a seeded synthetic dataset, `run` executes the
//! measurement pipeline over a dataset manifest, `report` derives the
//! dataset-level analysis tables, `lisa` prints one image's local
//! autocorrelation table, and `moran` tests a single value vector.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O failures, 2 on
//! malformed data files. `SCM_OUT_DIR` and `SCM_JOBS` supply the output
//! directory and parallelism degree when the flags are absent; no other
//! setting reads the environment.

mod batch;
mod config;
mod error;
mod formats;
mod manifest;
mod reports;
mod synth_cmd;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use scm_core::analysis::Measure;
use scm_core::diagnostics::morans_test_with;
use scm_core::weights::{GridCoords, SpatialWeights};

use crate::config::{parse_alternative, parse_k_list, parse_prediction, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::DatasetManifest;
use crate::reports::{LisaTableParams, ReportParams};

#[derive(Parser)]
#[command(
    name = "scm",
    version,
    about = "Quantify how much spatial context attention maps carry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML recipe
    Synth {
        /// Dataset recipe file
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory
        #[arg(long, env = "SCM_OUT_DIR")]
        out: PathBuf,
        /// Write features as binary 32-bit blocks instead of text tables
        #[arg(long)]
        binary: bool,
    },
    /// Run the measurement pipeline over every (image, fold, k) task
    Run {
        /// Dataset manifest file
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for results.csv and failures.csv
        #[arg(long, env = "SCM_OUT_DIR")]
        out: PathBuf,
        /// Collinearity filter threshold on |Pearson correlation|
        #[arg(long, default_value_t = 0.6)]
        gamma: f64,
        /// Moran gate significance level
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Comma-separated neighborhood sizes
        #[arg(long, default_value = "8,24,48,99")]
        k: String,
        /// Permutations for the Moran gate
        #[arg(long, default_value_t = 999)]
        permutations: usize,
        /// Master seed every task seed derives from
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (defaults to all cores)
        #[arg(long, env = "SCM_JOBS")]
        jobs: Option<usize>,
        /// Highest power of W used to build 2SLS instruments
        #[arg(long, default_value_t = 1)]
        instrument_order: usize,
        /// Moran gate alternative: greater or two_sided
        #[arg(long, default_value = "greater")]
        alternative: String,
        /// Lag-model fitted values: structural or reduced_form
        #[arg(long, default_value = "structural")]
        prediction: String,
    },
    /// Derive analysis tables from a results table
    Report {
        /// results.csv produced by run
        #[arg(long)]
        results: PathBuf,
        /// Dataset manifest the results came from
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the report tables
        #[arg(long, env = "SCM_OUT_DIR")]
        out: PathBuf,
        /// Measure driving the most-spatial selection
        #[arg(long, default_value = "targets")]
        measure: String,
        /// Percentile of normal-class means used as selection threshold
        #[arg(long, default_value_t = 95.0)]
        q: f64,
        /// Emit a LISA table for this image id (repeatable)
        #[arg(long = "lisa-image")]
        lisa_images: Vec<String>,
        /// Model id for the LISA tables when an image has several
        #[arg(long)]
        lisa_model: Option<String>,
        /// Fold for the LISA tables
        #[arg(long, default_value_t = 0)]
        lisa_fold: usize,
        /// Neighborhood size for the LISA tables
        #[arg(long, default_value_t = 8)]
        lisa_k: usize,
        /// Collinearity threshold for the LISA residual fit
        #[arg(long, default_value_t = 0.6)]
        gamma: f64,
        /// Significance level for LISA labels
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Permutations for the LISA tables
        #[arg(long, default_value_t = 999)]
        permutations: usize,
        /// Master seed for the LISA tables
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (defaults to all cores)
        #[arg(long, env = "SCM_JOBS")]
        jobs: Option<usize>,
    },
    /// Local spatial autocorrelation table for one image
    Lisa {
        /// Dataset manifest file
        #[arg(long)]
        dataset: PathBuf,
        /// Image id to analyze
        #[arg(long)]
        image: String,
        /// Model id when the image has several
        #[arg(long)]
        model: Option<String>,
        /// Attention fold
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Neighborhood size
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Collinearity threshold for the residual fit
        #[arg(long, default_value_t = 0.6)]
        gamma: f64,
        /// Significance level for cluster labels
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Conditional permutations per region
        #[arg(long, default_value_t = 999)]
        permutations: usize,
        /// Master seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (defaults to all cores)
        #[arg(long, env = "SCM_JOBS")]
        jobs: Option<usize>,
    },
    /// Global Moran permutation test for one value vector
    Moran {
        /// Patch coordinate file (row,col)
        #[arg(long)]
        coords: PathBuf,
        /// Single-column value table
        #[arg(long)]
        values: PathBuf,
        /// Weights construction: knn, queen or rook
        #[arg(long, default_value = "knn")]
        weights: String,
        /// Neighborhood size for knn weights
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Number of permutations
        #[arg(long, default_value_t = 999)]
        permutations: usize,
        /// Permutation seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Alternative hypothesis: greater or two_sided
        #[arg(long, default_value = "greater")]
        alternative: String,
        /// Worker threads (defaults to all cores)
        #[arg(long, env = "SCM_JOBS")]
        jobs: Option<usize>,
    },
}

#[cfg(feature = "parallel")]
fn init_parallelism(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Config("jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_parallelism(jobs: Option<usize>) -> Result<()> {
    if jobs == Some(0) {
        return Err(CliError::Config("jobs must be positive".into()));
    }
    Ok(())
}

fn parse_measure(s: &str) -> Result<Measure> {
    s.parse()
        .map_err(|e: scm_core::Error| CliError::Config(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, binary } => {
            let ds = synth_cmd::DatasetSpec::load(&spec)?;
            let s = synth_cmd::generate(&ds, &out, binary)?;
            println!(
                "wrote {} images ({} manifest rows) under {}",
                s.n_images,
                s.n_rows,
                s.manifest_path.parent().unwrap_or(&out).display()
            );
        }
        Command::Run {
            dataset,
            out,
            gamma,
            alpha,
            k,
            permutations,
            seed,
            jobs,
            instrument_order,
            alternative,
            prediction,
        } => {
            init_parallelism(jobs)?;
            let cfg = RunConfig {
                gamma,
                alpha,
                k_list: parse_k_list(&k)?,
                n_permutations: permutations,
                master_seed: seed,
                out_dir: out,
                jobs,
                instrument_order,
                alternative: parse_alternative(&alternative)?,
                prediction: parse_prediction(&prediction)?,
            };
            cfg.validate()?;
            let manifest = DatasetManifest::load(&dataset)?;
            let s = batch::run_batch(&manifest, &cfg)?;
            println!(
                "wrote {} result rows to {} ({} failures in {})",
                s.n_results,
                s.results_path.display(),
                s.n_failures,
                s.failures_path.display()
            );
        }
        Command::Report {
            results,
            dataset,
            out,
            measure,
            q,
            lisa_images,
            lisa_model,
            lisa_fold,
            lisa_k,
            gamma,
            alpha,
            permutations,
            seed,
            jobs,
        } => {
            init_parallelism(jobs)?;
            let params = ReportParams {
                results,
                dataset,
                out_dir: out,
                measure: parse_measure(&measure)?,
                q,
                lisa_images,
                lisa_model,
                lisa: LisaTableParams {
                    fold: lisa_fold,
                    k: lisa_k,
                    gamma,
                    alpha,
                    n_permutations: permutations,
                    master_seed: seed,
                },
            };
            let outcome = reports::emit_reports(&params)?;
            println!(
                "analyzed {} result rows into {} files; summary at {}",
                outcome.n_rows,
                outcome.n_files,
                outcome.summary_path.display()
            );
        }
        Command::Lisa {
            dataset,
            image,
            model,
            fold,
            k,
            gamma,
            alpha,
            permutations,
            seed,
            out,
            jobs,
        } => {
            init_parallelism(jobs)?;
            let manifest = DatasetManifest::load(&dataset)?;
            let row = manifest.find(&image, model.as_deref())?;
            let img = manifest.load_image(row)?;
            let params = LisaTableParams {
                fold,
                k,
                gamma,
                alpha,
                n_permutations: permutations,
                master_seed: seed,
            };
            let rows = reports::lisa_rows(&img, &params)?;
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
                    reports::write_lisa_rows(std::io::BufWriter::new(file), &rows)
                        .map_err(|e| CliError::io(&path, e))?;
                }
                None => {
                    reports::write_lisa_rows(std::io::stdout().lock(), &rows)
                        .map_err(|e| CliError::io("stdout", e))?;
                }
            }
        }
        Command::Moran {
            coords,
            values,
            weights,
            k,
            permutations,
            seed,
            alternative,
            jobs,
        } => {
            init_parallelism(jobs)?;
            let positions = formats::read_coords(&coords)?;
            let grid =
                GridCoords::new(positions).map_err(|e| CliError::schema(&coords, e.to_string()))?;
            let m = formats::read_matrix(&values)?;
            if m.ncols() != 1 {
                return Err(CliError::schema(
                    &values,
                    format!("expected a single value column, found {}", m.ncols()),
                ));
            }
            let x: Vec<f64> = m.column(0).iter().copied().collect();
            let w = match weights.as_str() {
                "knn" => SpatialWeights::knn(&grid, k)?,
                "queen" => SpatialWeights::queen(&grid)?,
                "rook" => SpatialWeights::rook(&grid)?,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown weights {other:?}; expected knn, queen or rook"
                    )))
                }
            };
            let r = morans_test_with(&x, &w, permutations, seed, parse_alternative(&alternative)?)?;
            let json = serde_json::to_string_pretty(&r)
                .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
