//! Release gate: eleven numbered checks covering oracle equivalence,
//! estimator recovery, measure behavior on ground-truth synthetic data,
//! determinism of the batch runner, and the statistical utilities.
//!
//! Every test prints one `criterion NN [PASS|FAIL]` line and then asserts.
//! Run `cargo test --test acceptance -- --nocapture --test-threads=1` to see
//! the listing in order. All tolerances are pinned below.

// Frozen reference p-values keep their full printed digits even where f64
// rounds them.
#![allow(clippy::excessive_precision)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use scm_core::analysis::{tumor_spread, welch_ttest, welch_ttest_with, wilcoxon_signed_rank};
use scm_core::diagnostics::{lisa, morans_i, morans_test};
use scm_core::pipeline::{run_image, ScmOptions};
use scm_core::regression::{error_fit_gmm, lag_fit_2sls, ols_fit, slx_fit, DesignMatrix};
use scm_core::rng::rng_from_seed;
use scm_core::synth::{gen_image, GridSpec, SignalKind, SynthSpec};
use scm_core::weights::{GridCoords, SpatialWeights};
use scm_core::Alternative;
use tempfile::TempDir;

const TOL_MORAN_BRUTE: f64 = 1e-10;
const TOL_CHECKERBOARD: f64 = 1e-12;
const NULL_RATE_LO: f64 = 0.01;
const NULL_RATE_HI: f64 = 0.12;
const RHO_WINDOW: (f64, f64) = (0.45, 0.55);
const RHO_NULL_WINDOW: (f64, f64) = (-0.05, 0.05);
const LAMBDA_WINDOW: (f64, f64) = (0.30, 0.50);
const LAMBDA_NULL_WINDOW: (f64, f64) = (-0.05, 0.05);
const TOL_SLX_EXACT: f64 = 1e-8;
const TOL_NESTING: f64 = 1e-12;
const P_SEPARATION_TARGETS: f64 = 0.01;
const P_SEPARATION_RESIDUALS: f64 = 0.05;
const TOL_LISA_IDENTITY: f64 = 1e-8;
const TOL_STATS_ORACLE: f64 = 1e-6;
const MONTE_CARLO_REPS: u64 = 50;
const SEPARATION_REPS: u64 = 30;
const SWEEP_REPS: u64 = 30;

/// Prints the gate line whether the check returns, fails, or panics.
fn criterion(n: u32, description: &str, check: impl FnOnce() -> bool) {
    let pass = catch_unwind(AssertUnwindSafe(check)).unwrap_or(false);
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:02} [{verdict}] {description}");
    assert!(pass, "criterion {n:02} failed: {description}");
}

fn spec_20x20(seed: u64, signal: SignalKind, sigma: f64) -> SynthSpec {
    SynthSpec {
        grid: GridSpec {
            rows: 20,
            cols: 20,
            hole_fraction: 0.0,
        },
        k: 8,
        p: 3,
        beta: vec![1.0, -0.5, 0.8],
        signal,
        noise_sigma: sigma,
        seed,
    }
}

fn normals(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

fn grid_10x10_knn8() -> (GridCoords, SpatialWeights) {
    let coords = GridCoords::full_grid(10, 10).unwrap();
    let w = SpatialWeights::knn(&coords, 8).unwrap();
    (coords, w)
}

/// Values +1 on even (row+col) cells, -1 on odd ones.
fn checkerboard(rows: u32, cols: u32) -> (Vec<f64>, SpatialWeights) {
    let coords = GridCoords::full_grid(rows, cols).unwrap();
    let values = coords
        .positions()
        .iter()
        .map(|&(r, c)| if (r + c) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let w = SpatialWeights::rook(&coords).unwrap();
    (values, w)
}

fn moran_brute_force(x: &[f64], w: &SpatialWeights) -> f64 {
    let n = x.len();
    let mut dense = vec![vec![0.0; n]; n];
    for (i, row) in dense.iter_mut().enumerate() {
        for &(j, wij) in w.neighbors(i) {
            row[j] = wij;
        }
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let mut cross = 0.0;
    let mut s0 = 0.0;
    for i in 0..n {
        for j in 0..n {
            cross += dense[i][j] * z[i] * z[j];
            s0 += dense[i][j];
        }
    }
    let m2 = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
    (cross / s0) / m2
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c01_moran_matches_brute_force_and_checkerboard() {
    criterion(
        1,
        "global statistic equals the brute-force double sum",
        || {
            let (_, w) = grid_10x10_knn8();
            let exact = (0..100).all(|i| {
                let x = normals(100 + i, 100);
                (morans_i(&x, &w).unwrap() - moran_brute_force(&x, &w)).abs() < TOL_MORAN_BRUTE
            });
            let (values, rook) = checkerboard(2, 2);
            let board = (morans_i(&values, &rook).unwrap() + 1.0).abs() <= TOL_CHECKERBOARD;
            exact && board
        },
    );
}

#[test]
fn c02_permutation_test_is_calibrated_under_the_null() {
    criterion(
        2,
        "null rejection rate stays near the nominal level",
        || {
            let (_, w) = grid_10x10_knn8();
            let rejections = (0..200u64)
                .filter(|&i| {
                    let x = normals(500 + i, 100);
                    morans_test(&x, &w, 999, 900 + i).unwrap().pseudo_p < 0.05
                })
                .count();
            let rate = rejections as f64 / 200.0;
            (NULL_RATE_LO..=NULL_RATE_HI).contains(&rate)
        },
    );
}

fn design_and_weights(
    img: &scm_core::pipeline::ImageTensorSet,
) -> (DesignMatrix, Vec<f64>, SpatialWeights) {
    let x = DesignMatrix::from_selected(&img.features, &[0, 1, 2]).unwrap();
    let y = img.attention.column(0).iter().copied().collect();
    let w = SpatialWeights::knn(&img.coords, 8).unwrap();
    (x, y, w)
}

#[test]
fn c03_two_stage_least_squares_recovers_rho() {
    criterion(3, "lag estimator recovers rho at 0.5 and at 0", || {
        [(0.5, 1000u64, RHO_WINDOW), (0.0, 2000, RHO_NULL_WINDOW)]
            .into_iter()
            .all(|(rho, base, (lo, hi))| {
                let estimates: Vec<f64> = (0..MONTE_CARLO_REPS)
                    .map(|i| {
                        let img =
                            gen_image(&spec_20x20(base + i, SignalKind::Targets { rho }, 0.1))
                                .unwrap();
                        let (x, y, w) = design_and_weights(&img);
                        lag_fit_2sls(&x, &y, &w, 1).unwrap().rho.unwrap()
                    })
                    .collect();
                (lo..=hi).contains(&mean(&estimates))
            })
    });
}

#[test]
fn c04_gmm_recovers_lambda() {
    criterion(4, "error estimator recovers lambda at 0.4 and at 0", || {
        [
            (0.4, 3000u64, LAMBDA_WINDOW),
            (0.0, 4000, LAMBDA_NULL_WINDOW),
        ]
        .into_iter()
        .all(|(lambda, base, (lo, hi))| {
            let estimates: Vec<f64> = (0..MONTE_CARLO_REPS)
                .map(|i| {
                    let img =
                        gen_image(&spec_20x20(base + i, SignalKind::Residuals { lambda }, 1.0))
                            .unwrap();
                    let (x, y, w) = design_and_weights(&img);
                    error_fit_gmm(&x, &y, &w).unwrap().lambda.unwrap()
                })
                .collect();
            (lo..=hi).contains(&mean(&estimates))
        })
    });
}

#[test]
fn c05_slx_is_exact_without_noise_and_never_fits_worse() {
    criterion(
        5,
        "lagged-features fit is exact on noise-free data and nests OLS",
        || {
            let exact = (0..20u64).all(|seed| {
                let mut spec = spec_20x20(seed, SignalKind::Features { theta: 0.7 }, 0.0);
                spec.grid = GridSpec {
                    rows: 10,
                    cols: 10,
                    hole_fraction: 0.0,
                };
                let img = gen_image(&spec).unwrap();
                let (x, y, w) = design_and_weights(&img);
                let fit = slx_fit(&x, &y, &w).unwrap();
                let beta_ok = fit.beta[0].abs() < TOL_SLX_EXACT
                    && fit.beta[1..]
                        .iter()
                        .zip(&spec.beta)
                        .all(|(got, want)| (got - want).abs() < TOL_SLX_EXACT);
                let theta_ok = fit
                    .theta
                    .unwrap()
                    .iter()
                    .all(|t| (t - 0.7).abs() < TOL_SLX_EXACT);
                beta_ok && theta_ok
            });

            let (_, w) = grid_10x10_knn8();
            let nested = (0..100u64).all(|seed| {
                let raw = normals(10_000 + seed, 100 * 4);
                let features = DMatrix::from_row_slice(100, 4, &raw);
                let y = normals(20_000 + seed, 100);
                let x = DesignMatrix::from_selected(&features, &[0, 1, 2, 3]).unwrap();
                let r2_ols = ols_fit(&x, &y).unwrap().r2_classic.unwrap();
                let r2_slx = slx_fit(&x, &y, &w).unwrap().r2_classic.unwrap();
                r2_slx >= r2_ols - TOL_NESTING
            });
            exact && nested
        },
    );
}

/// Measures for one arm of a separation check, gate disabled so every image
/// reports its spatial fits.
fn measures_at_k8(
    base_seed: u64,
    signal: SignalKind,
    pick: fn(&scm_core::pipeline::SpatialScms) -> f64,
) -> Vec<f64> {
    let opts = ScmOptions {
        alpha: 1.0,
        ..ScmOptions::default()
    };
    (0..SEPARATION_REPS)
        .map(|i| {
            let img = gen_image(&spec_20x20(base_seed + i, signal, 1.0)).unwrap();
            let r = run_image(&img, 0, 8, &opts).unwrap();
            pick(&r.spatial.unwrap())
        })
        .collect()
}

#[test]
fn c06_measures_separate_signal_from_no_signal() {
    criterion(
        6,
        "targets and residuals measures separate their DGPs from noise",
        || {
            let targets_signal =
                measures_at_k8(5000, SignalKind::Targets { rho: 0.6 }, |s| s.scm_targets);
            let targets_null = measures_at_k8(6000, SignalKind::None, |s| s.scm_targets);
            let targets_ok = mean(&targets_signal) > 0.0
                && welch_ttest_with(&targets_signal, &targets_null, Alternative::Greater)
                    .unwrap()
                    .p
                    < P_SEPARATION_TARGETS;

            // scm_residuals <= 0 for any lambda: the error fit predicts from the
            // non-spatial span [1 X] alone, and OLS already maximizes the pseudo
            // R-squared over that span. Signal therefore shows as larger
            // magnitude, tested one-sided on the negated values.
            let residual_signal: Vec<f64> =
                measures_at_k8(7000, SignalKind::Residuals { lambda: 0.5 }, |s| {
                    s.scm_residuals
                })
                .iter()
                .map(|v| -v)
                .collect();
            let residual_null: Vec<f64> =
                measures_at_k8(8000, SignalKind::None, |s| s.scm_residuals)
                    .iter()
                    .map(|v| -v)
                    .collect();
            let residuals_ok =
                welch_ttest_with(&residual_signal, &residual_null, Alternative::Greater)
                    .unwrap()
                    .p
                    < P_SEPARATION_RESIDUALS;
            targets_ok && residuals_ok
        },
    );
}

#[test]
fn c07_targets_measure_degrades_with_mismatched_k() {
    criterion(
        7,
        "mean targets measure is monotone non-increasing over the k sweep",
        || {
            let opts = ScmOptions {
                alpha: 1.0,
                ..ScmOptions::default()
            };
            let ks = [8usize, 24, 48, 99];
            let mut by_k = vec![Vec::new(); ks.len()];
            for i in 0..SWEEP_REPS {
                let img = gen_image(&spec_20x20(9000 + i, SignalKind::Targets { rho: 0.6 }, 1.0))
                    .unwrap();
                for (slot, &k) in ks.iter().enumerate() {
                    let r = run_image(&img, 0, k, &opts).unwrap();
                    by_k[slot].push(r.spatial.unwrap().scm_targets);
                }
            }
            let means: Vec<f64> = by_k.iter().map(|v| mean(v)).collect();
            means[0] > 0.0 && means.windows(2).all(|pair| pair[1] <= pair[0])
        },
    );
}

#[test]
fn c08_queen_and_knn8_agree_on_interior_cells() {
    criterion(
        8,
        "queen contiguity equals kNN-8 on all 64 interior cells",
        || {
            let (coords, knn) = grid_10x10_knn8();
            let queen = SpatialWeights::queen(&coords).unwrap();
            coords
                .positions()
                .iter()
                .enumerate()
                .filter(|&(_, &(r, c))| (1..=8).contains(&r) && (1..=8).contains(&c))
                .all(|(i, _)| {
                    let a: Vec<usize> = knn.neighbor_indices(i).collect();
                    let b: Vec<usize> = queen.neighbor_indices(i).collect();
                    a == b
                })
        },
    );
}

#[test]
fn c09_local_statistics_sum_to_the_global_one() {
    criterion(
        9,
        "local values sum to S0 times the global statistic",
        || {
            let (_, w) = grid_10x10_knn8();
            let identity = (0..100u64).all(|i| {
                let x = normals(700 + i, 100);
                let local = lisa(&x, &w, 99, 30_000 + i, 0.05).unwrap();
                let total: f64 = local.local_i.iter().sum();
                (total - w.s0() * morans_i(&x, &w).unwrap()).abs() < TOL_LISA_IDENTITY
            });
            let boards = [(2u32, 2u32), (4, 4)].into_iter().all(|(rows, cols)| {
                let (values, rook) = checkerboard(rows, cols);
                let local = lisa(&values, &rook, 99, 31_000, 0.05).unwrap();
                local
                    .local_i
                    .iter()
                    .all(|v| (v + 1.0).abs() <= TOL_CHECKERBOARD)
            });
            identity && boards
        },
    );
}

const DATASET_TOML: &str = r#"
master_seed = 42
folds = 2
models = ["net-a"]
test_fraction = 0.5

[grid]
rows = 10
cols = 10
hole_fraction = 0.05

[features]
k = 8
p = 3
beta = [1.0, -0.5, 0.8]
noise_sigma = 1.0

[[groups]]
label = "tumor"
count = 2
signal = { kind = "targets", rho = 0.6 }

[[groups]]
label = "normal"
count = 2
signal = { kind = "none" }
"#;

fn scm(args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scm"));
    cmd.env_remove("SCM_OUT_DIR").env_remove("SCM_JOBS");
    cmd.args(args).output().unwrap()
}

fn run_with_jobs(manifest: &Path, out: &Path, jobs: Option<&str>) -> Vec<u8> {
    let mut args = vec![
        "run",
        "--dataset",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--k",
        "8,24",
        "--permutations",
        "199",
        "--seed",
        "42",
    ];
    if let Some(j) = jobs {
        args.extend(["--jobs", j]);
    }
    let output = scm(&args);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    std::fs::read(out.join("results.csv")).unwrap()
}

#[test]
fn c10_batch_runs_are_byte_identical_across_parallelism() {
    criterion(
        10,
        "equal seeds give byte-identical results at any worker count",
        || {
            let dir = TempDir::new().unwrap();
            let spec = dir.path().join("dataset.toml");
            std::fs::write(&spec, DATASET_TOML).unwrap();
            let data = dir.path().join("data");
            let synth = scm(&[
                "synth",
                "--spec",
                spec.to_str().unwrap(),
                "--out",
                data.to_str().unwrap(),
            ]);
            assert!(
                synth.status.success(),
                "{}",
                String::from_utf8_lossy(&synth.stderr)
            );
            let manifest = data.join("manifest.csv");
            let serial = run_with_jobs(&manifest, &dir.path().join("serial"), Some("1"));
            let wide = run_with_jobs(&manifest, &dir.path().join("wide"), Some("4"));
            let default = run_with_jobs(&manifest, &dir.path().join("default"), None);
            !serial.is_empty() && serial == wide && serial == default
        },
    );
}

#[test]
fn c11_statistical_utilities_match_reference_values() {
    criterion(11, "test statistics match frozen reference values", || {
        let w1 = welch_ttest(&[1.0, 2.0, 3.0, 4.0, 5.0], &[11.0, 12.0, 13.0, 14.0, 15.0]).unwrap();
        let case1 = (w1.p - 8.4881815276284992e-06).abs() < TOL_STATS_ORACLE;

        let a2 = [2.1, 3.4, 1.9, 4.0, 2.7, 3.3];
        let b2 = [1.2, 2.2, 1.8, 2.5];
        let w2 = welch_ttest(&a2, &b2).unwrap();
        let g2 = welch_ttest_with(&a2, &b2, Alternative::Greater).unwrap();
        let case2 = (w2.p - 5.5423636511144590e-02).abs() < TOL_STATS_ORACLE
            && (g2.p - 2.7711818255572295e-02).abs() < TOL_STATS_ORACLE;

        let w3 = welch_ttest(&[5.0, 6.0, 7.0], &[5.0, 6.0, 7.1]).unwrap();
        let case3 = (w3.p - 9.7015720517226234e-01).abs() < TOL_STATS_ORACLE;

        let a4 = [3.0, 5.0, 4.0, 6.0, 2.0, 7.0, 5.5, 4.5, 3.5, 6.5];
        let b4 = [3.0, 4.0, 5.0, 4.0, 2.5, 6.0, 5.0, 4.0, 3.5, 5.0];
        let w4 = wilcoxon_signed_rank(&a4, &b4).unwrap();
        let case4 = w4.w == 7.0
            && w4.n_used == 8
            && (w4.p - 1.3756389390990328e-01).abs() < TOL_STATS_ORACLE;

        let a5: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let b5: Vec<f64> = a5.iter().map(|v| v + 1.0).collect();
        let w5 = wilcoxon_signed_rank(&a5, &b5).unwrap();
        let case5 = w5.w == 0.0 && (w5.p - 4.6174279569064289e-08).abs() < TOL_STATS_ORACLE;

        let spread = tumor_spread(&[(0, 0), (3, 4)]) == 5.0;
        case1 && case2 && case3 && case4 && case5 && spread
    });
}
