//! Reduced-scale Monte Carlo checks that each estimator recovers its
//! generating parameter. The full-scale versions gate the release in the
//! workspace acceptance suite; these keep the core crate self-checking.

use scm_core::pipeline::{run_image, ScmOptions};
use scm_core::regression::{error_fit_gmm, lag_fit_2sls_with, DesignMatrix, LagPrediction};
use scm_core::synth::{gen_image, GridSpec, SignalKind, SynthSpec};
use scm_core::weights::SpatialWeights;

const REPS: u64 = 10;

fn spec(seed: u64, signal: SignalKind, sigma: f64) -> SynthSpec {
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

fn design_of(img: &scm_core::pipeline::ImageTensorSet) -> (DesignMatrix, Vec<f64>, SpatialWeights) {
    let x = DesignMatrix::from_selected(&img.features, &[0, 1, 2]).unwrap();
    let y = img.attention.column(0).iter().copied().collect();
    let w = SpatialWeights::knn(&img.coords, 8).unwrap();
    (x, y, w)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn two_stage_least_squares_recovers_rho() {
    for (rho, lo, hi) in [(0.5, 0.45, 0.55), (0.0, -0.05, 0.05)] {
        let estimates: Vec<f64> = (0..REPS)
            .map(|i| {
                let img = gen_image(&spec(1000 + i, SignalKind::Targets { rho }, 0.1)).unwrap();
                let (x, y, w) = design_of(&img);
                lag_fit_2sls_with(&x, &y, &w, 1, LagPrediction::Structural)
                    .unwrap()
                    .rho
                    .unwrap()
            })
            .collect();
        let m = mean(&estimates);
        assert!((lo..=hi).contains(&m), "rho {rho}: mean estimate {m}");
    }
}

#[test]
fn gmm_recovers_lambda() {
    for (lambda, lo, hi) in [(0.4, 0.25, 0.55), (0.0, -0.1, 0.1)] {
        let estimates: Vec<f64> = (0..REPS)
            .map(|i| {
                let img =
                    gen_image(&spec(3000 + i, SignalKind::Residuals { lambda }, 1.0)).unwrap();
                let (x, y, w) = design_of(&img);
                error_fit_gmm(&x, &y, &w).unwrap().lambda.unwrap()
            })
            .collect();
        let m = mean(&estimates);
        assert!((lo..=hi).contains(&m), "lambda {lambda}: mean estimate {m}");
    }
}

#[test]
fn fitting_at_coarser_k_degrades_scm_targets() {
    let opts = ScmOptions {
        alpha: 1.0,
        ..ScmOptions::default()
    };
    let ks = [8usize, 24, 48, 99];
    let mut by_k = vec![Vec::new(); ks.len()];
    for i in 0..REPS {
        let img = gen_image(&spec(9000 + i, SignalKind::Targets { rho: 0.6 }, 1.0)).unwrap();
        for (slot, &k) in ks.iter().enumerate() {
            let r = run_image(&img, 0, k, &opts).unwrap();
            by_k[slot].push(r.spatial.unwrap().scm_targets);
        }
    }
    let means: Vec<f64> = by_k.iter().map(|v| mean(v)).collect();
    for pair in means.windows(2) {
        assert!(
            pair[1] <= pair[0],
            "scm_targets rose from {} to {} along the k sweep {means:?}",
            pair[0],
            pair[1]
        );
    }
    assert!(
        means[0] > 0.05,
        "signal too weak at matched k: {}",
        means[0]
    );
}
